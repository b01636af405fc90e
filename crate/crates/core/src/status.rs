//! Line-oriented status endpoint. One request line per connection; the
//! response is written and the connection closed.
//!
//! ```text
//! STATUS <hyperjob>              JOB <id> <site> <nn|job0> <state> ...
//! SUBMIT <plan> <manifest>       HYPERJOB <id>
//! RESULT <hyperjob>              <bundle path> | PENDING
//! DELEGATE <dn> <lifetime>       TOKEN <id> <expires_at>
//! anything failing               ERR <message>
//! ```
//!
//! The same port also answers `GET /status/<hyperjob>` and
//! `GET /result/<hyperjob>` as HTTP/1.0 so a browser can download bundles.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::collector::{fetch_bundles, merge, publish_bundle, BUNDLE_MEDIA_TYPE};
use crate::orchestrator::{Grid, JobKind, JobRow};
use crate::query::SitePlan;
use crate::sandbox::SandboxManifest;
use crate::vo::DistinguishedName;

/// Reads a plan file; its task lists live at `<plan dir>/<site>/data-<nn>.tcl`.
pub fn load_plan(path: &Path) -> Result<SitePlan, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    SitePlan::from_plan_text(&text, |site, file| {
        let p = dir.join(site).join(file);
        std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))
    })
    .map_err(|e| e.to_string())
}

pub fn load_manifest(path: &Path) -> Result<SandboxManifest, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let default = path.file_stem().map_or("script.tcl".into(), |s| format!("{}.tcl", s.to_string_lossy()));
    SandboxManifest::parse(&default, &text).map_err(|e| e.to_string())
}

pub fn format_row(r: &JobRow) -> String {
    let nn = match (r.kind, r.nn) {
        (JobKind::Job0, _) | (_, None) => "job0".to_string(),
        (_, Some(n)) => n.to_string(),
    };
    format!("JOB {} {} {} {}", r.job_id, r.site_id, nn, r.state)
}

#[derive(Debug, Clone)]
pub struct StatusContext {
    /// Where merged bundles are written for RESULT.
    pub results_dir: PathBuf,
}

/// Answers one request line. Never fails; errors become `ERR` lines.
pub fn handle_request(grid: &mut Grid, ctx: &StatusContext, line: &str) -> String {
    match respond(grid, ctx, line.trim()) {
        Ok(s) => s,
        Err(e) => format!("ERR {e}\n"),
    }
}

fn respond(grid: &mut Grid, ctx: &StatusContext, line: &str) -> Result<String, String> {
    let words: Vec<&str> = line.split_whitespace().collect();
    match words.as_slice() {
        ["STATUS", hj] => {
            let snap = grid.poll_hyperjob(hj).map_err(|e| e.to_string())?;
            Ok(snap.rows.iter().map(|r| format_row(r) + "\n").collect())
        }
        ["SUBMIT", plan, manifest] => {
            let plan = load_plan(Path::new(plan))?;
            let manifest = load_manifest(Path::new(manifest))?;
            let token = grid
                .latest_token()
                .map(|t| t.id.clone())
                .ok_or("no delegation uploaded")?;
            let hj = grid
                .submit_hyperjob(&plan, &manifest, &token)
                .map_err(|e| e.to_string())?;
            Ok(format!("HYPERJOB {hj}\n"))
        }
        ["RESULT", hj] => {
            if !grid.hyperjob_settled(hj).map_err(|e| e.to_string())? {
                return Ok("PENDING\n".into());
            }
            let fetched = fetch_bundles(grid, hj).map_err(|e| e.to_string())?;
            if !fetched.pending.is_empty() {
                return Ok("PENDING\n".into());
            }
            let plan = grid.hyperjob(hj).map_err(|e| e.to_string())?.plan.clone();
            let bundle = merge(hj, &fetched.bundles, &plan).map_err(|e| e.to_string())?;
            let rec = publish_bundle(&bundle, &ctx.results_dir).map_err(|e| e.to_string())?;
            Ok(format!("{}\n", rec.path.display()))
        }
        ["DELEGATE", dn, lifetime] => {
            let dn = DistinguishedName::parse(dn).map_err(|e| e.to_string())?;
            let lifetime: u64 = lifetime.parse().map_err(|_| format!("bad lifetime {lifetime:?}"))?;
            let t = grid.delegate_proxy(dn, lifetime);
            Ok(format!("TOKEN {} {}\n", t.id, t.expires_at))
        }
        [] => Err("empty request".into()),
        [verb, ..] => Err(format!("unknown or malformed request {verb:?}")),
    }
}

/// Answers an HTTP request line such as `GET /result/hj1 HTTP/1.0`.
pub fn handle_http(grid: &mut Grid, ctx: &StatusContext, request_line: &str) -> Vec<u8> {
    let target = request_line.split_whitespace().nth(1).unwrap_or("");
    let (code, ctype, body) = match target.trim_start_matches('/').split_once('/') {
        Some(("status", hj)) => match respond(grid, ctx, &format!("STATUS {hj}")) {
            Ok(rows) => (200, "text/plain", rows.into_bytes()),
            Err(e) => (404, "text/plain", format!("{e}\n").into_bytes()),
        },
        Some(("result", hj)) => match respond(grid, ctx, &format!("RESULT {hj}")) {
            Ok(r) if r == "PENDING\n" => (409, "text/plain", r.into_bytes()),
            Ok(path) => match std::fs::read(path.trim_end()) {
                Ok(bytes) => (200, BUNDLE_MEDIA_TYPE, bytes),
                Err(e) => (500, "text/plain", format!("{e}\n").into_bytes()),
            },
            Err(e) => (404, "text/plain", format!("{e}\n").into_bytes()),
        },
        _ => (404, "text/plain", b"not found\n".to_vec()),
    };
    let reason = match code {
        200 => "OK",
        409 => "Conflict",
        500 => "Internal Server Error",
        _ => "Not Found",
    };
    let mut out = format!(
        "HTTP/1.0 {code} {reason}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\n\r\n",
        body.len()
    )
    .into_bytes();
    out.extend(body);
    out
}

/// Serves until `max_requests` (if any) have been answered. `after` runs
/// under the lock after each request, e.g. to persist state.
pub fn serve(
    listener: TcpListener,
    grid: Arc<Mutex<Grid>>,
    ctx: StatusContext,
    max_requests: Option<usize>,
    after: impl Fn(&Grid),
) -> std::io::Result<()> {
    let mut served = 0;
    for stream in listener.incoming() {
        let mut stream = stream?;
        let mut reader = BufReader::new(&stream);
        let mut line = String::new();
        if let Err(e) = reader.read_line(&mut line) {
            log::warn!("status read: {e}");
            continue;
        }
        let http = line.starts_with("GET ");
        if http {
            // drain headers so closing the socket does not reset the reply
            let mut header = String::new();
            while reader.read_line(&mut header).is_ok_and(|n| n > 0) && !header.trim().is_empty() {
                header.clear();
            }
        }
        let reply = {
            let mut g = grid.lock().unwrap_or_else(|p| p.into_inner());
            let r = if http {
                handle_http(&mut g, &ctx, &line)
            } else {
                handle_request(&mut g, &ctx, &line).into_bytes()
            };
            after(&g);
            r
        };
        if let Err(e) = stream.write_all(&reply) {
            log::warn!("status write: {e}");
        }
        served += 1;
        if max_requests.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{DatasetName, FileRecord};
    use crate::orchestrator::GridConfig;
    use crate::sitesim::SiteConfig;
    use crate::vo::Registry;
    use std::fs;
    use std::io::Read;
    use std::net::TcpStream;

    fn path(run: u32) -> String {
        FileRecord::for_dataset(DatasetName::new(run, "R14", "S1", "AllEvents").unwrap()).logical_path
    }

    fn setup(tmp: &Path) -> (Grid, PathBuf, PathBuf) {
        let mut g = Grid::new(GridConfig::default(), [SiteConfig::new("A", "/data/A")]).unwrap();
        let reg = Registry::new(tmp.join("registry"));
        reg.register_dn("alice", &DistinguishedName::parse("/O=g/CN=alice").unwrap()).unwrap();
        g.acl.set("alice", true);
        g.vo_round(&reg).unwrap();
        let site = g.site_mut("A").unwrap();
        for r in 1..=2 {
            site.catalog
                .insert(FileRecord::for_dataset(DatasetName::new(r, "R14", "S1", "AllEvents").unwrap()))
                .unwrap();
            site.catalog.set_local_flag(&path(r), true).unwrap();
        }
        site.materialize_local_data();
        let plan_dir = tmp.join("plan");
        fs::create_dir_all(plan_dir.join("A")).unwrap();
        fs::write(plan_dir.join("plan.txt"), "A data-0.tcl\nA data-1.tcl\n").unwrap();
        fs::write(plan_dir.join("A/data-0.tcl"), format!("input add {}\n", path(1))).unwrap();
        fs::write(plan_dir.join("A/data-1.tcl"), format!("input add {}\n", path(2))).unwrap();
        let manifest = tmp.join("ana.manifest");
        fs::write(&manifest, "binary BetaApp\nscript ana.tcl\n--- script ---\nev begin\n").unwrap();
        (g, plan_dir.join("plan.txt"), manifest)
    }

    #[test]
    fn protocol_flow() {
        let tmp = tempfile::tempdir().unwrap();
        let (mut g, plan, manifest) = setup(tmp.path());
        let ctx = StatusContext {
            results_dir: tmp.path().join("results"),
        };
        let submit = format!("SUBMIT {} {}", plan.display(), manifest.display());
        assert!(handle_request(&mut g, &ctx, &submit).starts_with("ERR no delegation"));
        let tok = handle_request(&mut g, &ctx, "DELEGATE /O=g/CN=alice 100000");
        assert!(tok.starts_with("TOKEN t1 "));
        assert_eq!(handle_request(&mut g, &ctx, &submit), "HYPERJOB hj1\n");
        let status = handle_request(&mut g, &ctx, "STATUS hj1");
        let lines: Vec<&str> = status.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].ends_with("A job0 queued"));
        assert!(lines[1].ends_with("A 0 submitted"));
        assert_eq!(handle_request(&mut g, &ctx, "RESULT hj1"), "PENDING\n");
        g.drain();
        let result = handle_request(&mut g, &ctx, "RESULT hj1");
        assert!(result.trim_end().ends_with("hj1.bundle"));
        assert!(Path::new(result.trim_end()).is_file());
        assert!(handle_request(&mut g, &ctx, "STATUS hj9").starts_with("ERR"));
        assert!(handle_request(&mut g, &ctx, "FROB").starts_with("ERR"));
        assert!(handle_request(&mut g, &ctx, "DELEGATE notadn 5").starts_with("ERR"));
    }

    #[test]
    fn serves_over_tcp() {
        let tmp = tempfile::tempdir().unwrap();
        let (g, _, _) = setup(tmp.path());
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let grid = Arc::new(Mutex::new(g));
        let ctx = StatusContext {
            results_dir: tmp.path().join("results"),
        };
        let server = std::thread::spawn(move || serve(listener, grid, ctx, Some(1), |_| {}));
        let mut s = TcpStream::connect(addr).unwrap();
        s.write_all(b"DELEGATE /O=g/CN=alice 60\n").unwrap();
        let mut reply = String::new();
        s.read_to_string(&mut reply).unwrap();
        assert_eq!(reply, "TOKEN t1 60\n");
        server.join().unwrap().unwrap();
    }

    #[test]
    fn http_download_carries_media_type() {
        let tmp = tempfile::tempdir().unwrap();
        let (mut g, plan, manifest) = setup(tmp.path());
        let ctx = StatusContext {
            results_dir: tmp.path().join("results"),
        };
        handle_request(&mut g, &ctx, "DELEGATE /O=g/CN=alice 100000");
        let submit = format!("SUBMIT {} {}", plan.display(), manifest.display());
        assert_eq!(handle_request(&mut g, &ctx, &submit), "HYPERJOB hj1\n");
        let pending = String::from_utf8(handle_http(&mut g, &ctx, "GET /result/hj1 HTTP/1.0")).unwrap();
        assert!(pending.starts_with("HTTP/1.0 409"));
        g.drain();

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let grid = Arc::new(Mutex::new(g));
        let server = std::thread::spawn(move || serve(listener, grid, ctx, Some(2), |_| {}));
        let get = |path: &str| {
            let mut s = TcpStream::connect(addr).unwrap();
            write!(s, "GET {path} HTTP/1.0\r\nHost: x\r\n\r\n").unwrap();
            let mut reply = Vec::new();
            s.read_to_end(&mut reply).unwrap();
            reply
        };
        let reply = get("/result/hj1");
        let split = reply.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
        let head = String::from_utf8_lossy(&reply[..split]);
        assert!(head.starts_with("HTTP/1.0 200 OK"));
        assert!(head.contains("Content-Type: application/x-gridlet-bundle"));
        let body = &reply[split + 4..];
        let bundle = crate::collector::MergedBundle::from_tar("hj1", body).unwrap();
        assert_eq!(bundle.completeness, 1.0);
        let status = String::from_utf8(get("/status/hj1")).unwrap();
        assert!(status.contains("JOB ") && status.contains(" done"));
        server.join().unwrap().unwrap();
    }
}
