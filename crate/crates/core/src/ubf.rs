//! User-based firewall: per-connection identity decision plus a conntrack-style flow table.
//!
//! Only new connections reach [`decide`]. Once a flow is admitted its packets
//! are matched against the [`FlowTable`] until the flow goes idle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::directory::Directory;
use crate::host::{Host, SocketRole};
use crate::ident::{self, IdentQuery, IdentResponse, IdentTransport, QueryOutcome};
use crate::net::{Endpoint, Proto};

/// Simulated time in milliseconds.
pub type Millis = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub threshold: u16,
    pub pass_ports: BTreeSet<u16>,
    pub tcp_idle_s: u64,
    pub udp_idle_s: u64,
    pub ident_timeout_ms: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            threshold: 1024,
            pass_ports: BTreeSet::from([ident::DEFAULT_PORT]),
            tcp_idle_s: 600,
            udp_idle_s: 30,
            ident_timeout_ms: 200,
        }
    }
}

impl EngineConfig {
    pub fn idle_ms(&self, proto: Proto) -> Millis {
        match proto {
            Proto::Tcp => self.tcp_idle_s * 1000,
            Proto::Udp => self.udp_idle_s * 1000,
        }
    }

    pub fn ident_timeout(&self) -> Duration {
        Duration::from_millis(self.ident_timeout_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PacketKind {
    #[serde(rename = "NEW_SYN")]
    NewSyn,
    #[serde(rename = "PACKET")]
    Packet,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConnectionEvent {
    pub proto: Proto,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub kind: PacketKind,
    pub at: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Allow,
    Deny,
    Pass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    SameUser,
    GroupMember,
    BelowThreshold,
    StaticPass,
    NoListener,
    NotMember,
    IdentFail,
    IdentTimeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AllowReason {
    SameUser,
    GroupMember,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PassReason {
    BelowThreshold,
    StaticPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DenyReason {
    NoListener,
    NotMember,
    IdentFail,
    IdentTimeout,
}

/// A firewall verdict. The decision/reason pairing is fixed by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Allow(AllowReason),
    Deny(DenyReason),
    Pass(PassReason),
}

impl Verdict {
    pub fn decision(self) -> Decision {
        match self {
            Verdict::Allow(_) => Decision::Allow,
            Verdict::Deny(_) => Decision::Deny,
            Verdict::Pass(_) => Decision::Pass,
        }
    }

    pub fn reason(self) -> Reason {
        match self {
            Verdict::Allow(AllowReason::SameUser) => Reason::SameUser,
            Verdict::Allow(AllowReason::GroupMember) => Reason::GroupMember,
            Verdict::Pass(PassReason::BelowThreshold) => Reason::BelowThreshold,
            Verdict::Pass(PassReason::StaticPass) => Reason::StaticPass,
            Verdict::Deny(DenyReason::NoListener) => Reason::NoListener,
            Verdict::Deny(DenyReason::NotMember) => Reason::NotMember,
            Verdict::Deny(DenyReason::IdentFail) => Reason::IdentFail,
            Verdict::Deny(DenyReason::IdentTimeout) => Reason::IdentTimeout,
        }
    }

    /// Rebuilds a verdict from its two halves; `None` for pairings that cannot occur.
    pub fn from_parts(decision: Decision, reason: Reason) -> Option<Verdict> {
        let v = match (decision, reason) {
            (Decision::Allow, Reason::SameUser) => Verdict::Allow(AllowReason::SameUser),
            (Decision::Allow, Reason::GroupMember) => Verdict::Allow(AllowReason::GroupMember),
            (Decision::Pass, Reason::BelowThreshold) => Verdict::Pass(PassReason::BelowThreshold),
            (Decision::Pass, Reason::StaticPass) => Verdict::Pass(PassReason::StaticPass),
            (Decision::Deny, Reason::NoListener) => Verdict::Deny(DenyReason::NoListener),
            (Decision::Deny, Reason::NotMember) => Verdict::Deny(DenyReason::NotMember),
            (Decision::Deny, Reason::IdentFail) => Verdict::Deny(DenyReason::IdentFail),
            (Decision::Deny, Reason::IdentTimeout) => Verdict::Deny(DenyReason::IdentTimeout),
            _ => return None,
        };
        Some(v)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}({:?})", self.decision(), self.reason())
    }
}

/// Decides a new inbound connection on the receiving host.
///
/// Order: static pass, listener lookup, ident query to the source host (or a
/// local lookup on loopback), same uid, connector in the listener's egid,
/// otherwise deny. Every failure path denies.
pub fn decide(
    event: &ConnectionEvent,
    local_host: &Host,
    transport: &dyn IdentTransport,
    dir: &Directory,
    config: &EngineConfig,
) -> Verdict {
    let port = event.dst.port;
    if port < config.threshold {
        return Verdict::Pass(PassReason::BelowThreshold);
    }
    if config.pass_ports.contains(&port) {
        return Verdict::Pass(PassReason::StaticPass);
    }
    let Some(listener) =
        local_host.lookup_socket_owner(dir, event.proto, port, SocketRole::Listener, None)
    else {
        return Verdict::Deny(DenyReason::NoListener);
    };

    let query = IdentQuery::new(event.proto, &event.src, &event.dst);
    let outcome = if event.src.host == local_host.address {
        QueryOutcome::Response(ident::respond(local_host, dir, &query))
    } else {
        ident::query_remote(transport, &event.src.host, &query, config.ident_timeout())
    };
    let conn_uid = match outcome {
        QueryOutcome::Response(IdentResponse::Ok { uid, .. }) => uid,
        QueryOutcome::Timeout => return Verdict::Deny(DenyReason::IdentTimeout),
        QueryOutcome::Response(IdentResponse::Err(_)) | QueryOutcome::TransportError => {
            return Verdict::Deny(DenyReason::IdentFail)
        }
    };

    if conn_uid == listener.uid {
        return Verdict::Allow(AllowReason::SameUser);
    }
    // A uid unknown to the local directory is a member of nothing.
    if dir.is_member(conn_uid, listener.egid).unwrap_or(false) {
        return Verdict::Allow(AllowReason::GroupMember);
    }
    Verdict::Deny(DenyReason::NotMember)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub proto: Proto,
    pub src: Endpoint,
    pub dst: Endpoint,
}

impl FlowKey {
    pub fn of(event: &ConnectionEvent) -> Self {
        Self { proto: event.proto, src: event.src.clone(), dst: event.dst.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowEntry {
    pub verdict: Verdict,
    pub expires_at: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PacketAction {
    Deliver,
    Drop,
    DeferToStatic,
}

/// Result of [`FlowTable::handle_packet`]: the action plus the verdict, if one was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handled {
    pub action: PacketAction,
    pub decided: Option<Verdict>,
}

#[derive(Debug, Clone)]
pub struct FlowTable {
    tcp_idle: Millis,
    udp_idle: Millis,
    entries: BTreeMap<FlowKey, FlowEntry>,
}

fn action_for(v: Verdict) -> PacketAction {
    match v {
        Verdict::Allow(_) => PacketAction::Deliver,
        Verdict::Pass(_) => PacketAction::DeferToStatic,
        Verdict::Deny(_) => PacketAction::Drop,
    }
}

impl FlowTable {
    pub fn new(config: &EngineConfig) -> Self {
        Self {
            tcp_idle: config.idle_ms(Proto::Tcp),
            udp_idle: config.idle_ms(Proto::Udp),
            entries: BTreeMap::new(),
        }
    }

    fn idle(&self, proto: Proto) -> Millis {
        match proto {
            Proto::Tcp => self.tcp_idle,
            Proto::Udp => self.udp_idle,
        }
    }

    /// Live entry for `key` at `now`; an entry with `expires_at <= now` is dropped.
    pub fn lookup(&mut self, key: &FlowKey, now: Millis) -> Option<FlowEntry> {
        match self.entries.get(key) {
            Some(e) if e.expires_at > now => Some(*e),
            Some(_) => {
                self.entries.remove(key);
                None
            }
            None => None,
        }
    }

    fn touch(&mut self, key: &FlowKey, now: Millis) {
        let idle = self.idle(key.proto);
        if let Some(e) = self.entries.get_mut(key) {
            e.expires_at = now + idle;
        }
    }

    fn admit(&mut self, key: FlowKey, verdict: Verdict, now: Millis) {
        debug_assert!(!matches!(verdict, Verdict::Deny(_)));
        let expires_at = now + self.idle(key.proto);
        self.entries.insert(key, FlowEntry { verdict, expires_at });
    }

    fn needs_decision(event: &ConnectionEvent) -> bool {
        event.proto == Proto::Udp || event.kind == PacketKind::NewSyn
    }

    /// Matches the packet against live flows, calling `decide` only for new connections.
    /// Denied connections are never cached.
    pub fn handle_packet(
        &mut self,
        event: &ConnectionEvent,
        decide: impl FnOnce(&ConnectionEvent) -> Verdict,
    ) -> Handled {
        let key = FlowKey::of(event);
        if let Some(entry) = self.lookup(&key, event.at) {
            self.touch(&key, event.at);
            return Handled { action: action_for(entry.verdict), decided: None };
        }
        if !Self::needs_decision(event) {
            return Handled { action: PacketAction::Drop, decided: None };
        }
        let verdict = decide(event);
        if !matches!(verdict, Verdict::Deny(_)) {
            self.admit(key, verdict, event.at);
        }
        Handled { action: action_for(verdict), decided: Some(verdict) }
    }

    /// Removes every entry with `expires_at <= now`.
    pub fn expire_flows(&mut self, now: Millis) -> usize {
        let before = self.entries.len();
        self.entries.retain(|_, e| e.expires_at > now);
        before - self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&FlowKey, &FlowEntry)> {
        self.entries.iter()
    }
}

/// A flow table shared between threads. The lock is not held while deciding,
/// so slow identity queries on one flow do not stall others.
#[derive(Debug)]
pub struct SharedFlowTable {
    inner: Mutex<FlowTable>,
}

impl SharedFlowTable {
    pub fn new(config: &EngineConfig) -> Self {
        Self { inner: Mutex::new(FlowTable::new(config)) }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, FlowTable> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn handle_packet(
        &self,
        event: &ConnectionEvent,
        decide: impl FnOnce(&ConnectionEvent) -> Verdict,
    ) -> Handled {
        let key = FlowKey::of(event);
        {
            let mut table = self.lock();
            if let Some(entry) = table.lookup(&key, event.at) {
                table.touch(&key, event.at);
                return Handled { action: action_for(entry.verdict), decided: None };
            }
        }
        if !FlowTable::needs_decision(event) {
            return Handled { action: PacketAction::Drop, decided: None };
        }
        let verdict = decide(event);
        if !matches!(verdict, Verdict::Deny(_)) {
            self.lock().admit(key, verdict, event.at);
        }
        Handled { action: action_for(verdict), decided: Some(verdict) }
    }

    pub fn expire_flows(&self, now: Millis) -> usize {
        self.lock().expire_flows(now)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }
}
