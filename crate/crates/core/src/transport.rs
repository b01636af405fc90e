//! Message transport between grid endpoints.
//!
//! Every inter-party interaction in the simulator goes through [`Transport::send`],
//! which either delivers (and records) the message or reports it undelivered.
//! The recorded log is what the scaling tests count.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    /// The experiment's home registry, where users drop their DN files.
    HomeRegistry,
    VoServer,
    /// Central metadata catalog holding the availability index.
    CatalogCentral,
    /// The web server acting on a delegated proxy.
    Server,
    /// A user's own desktop (the `gsub` path).
    User,
    Site(String),
}

impl Endpoint {
    pub fn site(id: impl Into<String>) -> Self {
        Endpoint::Site(id.into())
    }

    pub fn is_site(&self) -> bool {
        matches!(self, Endpoint::Site(_))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::HomeRegistry => f.write_str("home-registry"),
            Endpoint::VoServer => f.write_str("vo-server"),
            Endpoint::CatalogCentral => f.write_str("catalog-central"),
            Endpoint::Server => f.write_str("server"),
            Endpoint::User => f.write_str("user"),
            Endpoint::Site(id) => write!(f, "site:{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    VoRegistration,
    VoSync,
    FlagUpload,
    IndexDownload,
    RemoteQuery,
    StageTransfer,
    JobSubmit,
    LogFetch,
    BundleFetch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: MessageKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?} from {from} to {to} not delivered")]
pub struct Undelivered {
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: MessageKind,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Transport {
    log: Vec<Message>,
    down: BTreeSet<Endpoint>,
    cut: BTreeSet<(Endpoint, Endpoint)>,
}

impl Transport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(
        &mut self,
        from: Endpoint,
        to: Endpoint,
        kind: MessageKind,
    ) -> Result<(), Undelivered> {
        if !self.link_up(&from, &to) {
            return Err(Undelivered { from, to, kind });
        }
        self.log.push(Message { from, to, kind });
        Ok(())
    }

    pub fn link_up(&self, from: &Endpoint, to: &Endpoint) -> bool {
        !self.down.contains(from)
            && !self.down.contains(to)
            && !self.cut.contains(&(from.clone(), to.clone()))
    }

    pub fn reachable(&self, endpoint: &Endpoint) -> bool {
        !self.down.contains(endpoint)
    }

    /// Takes an endpoint off the network in both directions.
    pub fn take_down(&mut self, endpoint: Endpoint) {
        self.down.insert(endpoint);
    }

    pub fn bring_up(&mut self, endpoint: &Endpoint) {
        self.down.remove(endpoint);
    }

    /// Cuts one direction of one link.
    pub fn cut_link(&mut self, from: Endpoint, to: Endpoint) {
        self.cut.insert((from, to));
    }

    pub fn restore_link(&mut self, from: &Endpoint, to: &Endpoint) {
        self.cut.remove(&(from.clone(), to.clone()));
    }

    pub fn log(&self) -> &[Message] {
        &self.log
    }

    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.log.iter().filter(|m| m.kind == kind).count()
    }

    pub fn count_where(&self, pred: impl Fn(&Message) -> bool) -> usize {
        self.log.iter().filter(|m| pred(m)).count()
    }

    /// Messages delivered since `mark`, a previous value of [`Transport::len`].
    pub fn since(&self, mark: usize) -> &[Message] {
        &self.log[mark.min(self.log.len())..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cut_link_is_directional() {
        let mut t = Transport::new();
        t.cut_link(Endpoint::site("A"), Endpoint::CatalogCentral);
        assert!(t
            .send(Endpoint::site("A"), Endpoint::CatalogCentral, MessageKind::FlagUpload)
            .is_err());
        assert!(t
            .send(Endpoint::CatalogCentral, Endpoint::site("A"), MessageKind::IndexDownload)
            .is_ok());
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn down_endpoint_drops_both_directions() {
        let mut t = Transport::new();
        t.take_down(Endpoint::site("B"));
        assert!(t.send(Endpoint::Server, Endpoint::site("B"), MessageKind::JobSubmit).is_err());
        assert!(t.send(Endpoint::site("B"), Endpoint::Server, MessageKind::BundleFetch).is_err());
        t.bring_up(&Endpoint::site("B"));
        assert!(t.send(Endpoint::Server, Endpoint::site("B"), MessageKind::JobSubmit).is_ok());
        assert_eq!(t.count(MessageKind::JobSubmit), 1);
    }
}
