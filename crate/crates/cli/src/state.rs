//! On-disk state shared by the `gridlet` and `gsub` binaries.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gridlet::orchestrator::Grid;
use gridlet::vo::Registry;

pub const STATE_ENV: &str = "GRIDLET_STATE";
pub const DEFAULT_STATE_DIR: &str = "gridlet-state";

pub struct StateDir {
    pub root: PathBuf,
}

impl StateDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn grid_path(&self) -> PathBuf {
        self.root.join("grid.json")
    }

    pub fn registry(&self) -> Registry {
        Registry::new(self.root.join("registry"))
    }

    pub fn results_dir(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn exists(&self) -> bool {
        self.grid_path().is_file()
    }

    pub fn load(&self) -> Result<Grid> {
        let path = self.grid_path();
        if !path.is_file() {
            bail!("no grid state at {}; run `gridlet init` first", path.display());
        }
        let text = fs::read_to_string(&path).with_context(|| path.display().to_string())?;
        serde_json::from_str(&text).with_context(|| format!("corrupt state in {}", path.display()))
    }

    /// Writes via a temporary file so a crash never leaves half a state.
    pub fn save(&self, grid: &Grid) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        let tmp = self.root.join("grid.json.tmp");
        fs::write(&tmp, serde_json::to_vec(grid)?)?;
        fs::rename(&tmp, self.grid_path())?;
        Ok(())
    }
}

pub fn resolve_state_dir(arg: Option<&Path>) -> StateDir {
    match arg {
        Some(p) => StateDir::new(p),
        None => StateDir::new(std::env::var_os(STATE_ENV).map_or_else(|| DEFAULT_STATE_DIR.into(), PathBuf::from)),
    }
}
