//! Audits a trace for information flow between distinct unprivileged users.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::directory::{Directory, GroupId, GroupKind, UserId};
use crate::perm::Perms;
use crate::ubf::PacketAction;

use super::scenario::Scenario;
use super::trace::{Body, TraceRecord};
use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Channel {
    Network,
    File,
    ProcessListing,
    JobListing,
    CoResidency,
    GpuResidue,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Network => "NETWORK",
            Channel::File => "FILE",
            Channel::ProcessListing => "PROCESS_LISTING",
            Channel::JobListing => "JOB_LISTING",
            Channel::CoResidency => "CO_RESIDENCY",
            Channel::GpuResidue => "GPU_RESIDUE",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An unmediated flow. `evidence` holds 0-based trace record indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub channel: Channel,
    pub from_uid: UserId,
    pub to_uid: UserId,
    pub evidence: Vec<usize>,
}

/// A cross-user flow justified by a shared group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mediated {
    pub channel: Channel,
    pub from_uid: UserId,
    pub to_uid: UserId,
    pub via: GroupId,
    pub evidence: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResidualKind {
    WorldWritableDirNames,
    AbstractUds,
    RawIbVerbs,
}

impl ResidualKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ResidualKind::WorldWritableDirNames => "WORLD_WRITABLE_DIR_NAMES",
            ResidualKind::AbstractUds => "ABSTRACT_UDS",
            ResidualKind::RawIbVerbs => "RAW_IB_VERBS",
        }
    }
}

/// A known channel outside the model, carried over from the scenario's declarations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualChannel {
    pub kind: ResidualKind,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub records: usize,
    pub cross_user_flows: usize,
    pub violations: usize,
    pub mediated: usize,
    pub residual: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationReport {
    pub violations: Vec<Violation>,
    pub mediated: Vec<Mediated>,
    pub residual_channels: Vec<ResidualChannel>,
    pub summary: Summary,
}

impl IsolationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.summary;
        let _ = writeln!(
            out,
            "records: {}  cross-user flows: {}  violations: {}  mediated: {}  residual: {}",
            s.records, s.cross_user_flows, s.violations, s.mediated, s.residual
        );
        for v in &self.violations {
            let _ = writeln!(
                out,
                "VIOLATION {} uid {} -> uid {} (records {})",
                v.channel,
                v.from_uid,
                v.to_uid,
                join(&v.evidence)
            );
        }
        for m in &self.mediated {
            let _ = writeln!(
                out,
                "mediated {} uid {} -> uid {} via gid {} (records {})",
                m.channel,
                m.from_uid,
                m.to_uid,
                m.via,
                join(&m.evidence)
            );
        }
        for r in &self.residual_channels {
            let _ = writeln!(out, "residual {} {}", r.kind.as_str(), r.detail);
        }
        out
    }
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

type InstanceKey = (Channel, UserId, UserId, String);

#[derive(Default)]
struct Collector {
    instances: BTreeMap<InstanceKey, (Option<GroupId>, Vec<usize>)>,
}

impl Collector {
    fn add(&mut self, channel: Channel, from: UserId, to: UserId, key: String, via: Option<GroupId>, idx: usize) {
        if from == to || from.is_root() || to.is_root() {
            return;
        }
        let slot = self.instances.entry((channel, from, to, key)).or_insert((via, vec![]));
        // one unmediated observation taints the whole instance
        if via.is_none() {
            slot.0 = None;
        }
        slot.1.push(idx);
    }
}

fn is_project_with(dir: &Directory, gid: GroupId, a: UserId, b: UserId) -> bool {
    dir.group(gid).is_ok_and(|g| g.kind == GroupKind::Project && g.members.contains(&a) && g.members.contains(&b))
}

/// Classifies every cross-user flow in `trace` as mediated or a violation.
///
/// The first record must be the setup record produced for this exact scenario.
pub fn check_isolation(scenario: &Scenario, trace: &[TraceRecord]) -> Result<IsolationReport, SimError> {
    match trace.first().map(|r| &r.body) {
        Some(Body::Setup { scenario: digest, .. }) if digest == scenario.digest() => {}
        Some(Body::Setup { scenario: digest, .. }) => {
            return Err(SimError::TraceMismatch(format!(
                "trace digest {digest} differs from scenario digest {}",
                scenario.digest()
            )))
        }
        _ => return Err(SimError::TraceMismatch("first record is not a setup record".into())),
    }
    let world = scenario.build_world()?;
    let dir = &world.directory;
    let exempt: BTreeMap<&str, Option<GroupId>> =
        world.hosts.iter().map(|h| (h.id.as_str(), h.exempt_gid)).collect();

    let mut c = Collector::default();
    for (idx, rec) in trace.iter().enumerate() {
        match &rec.body {
            Body::Packet { proto, src, dst, action, from_uid, to_uid: Some(to), listener_egid, .. }
                if *action != PacketAction::Drop =>
            {
                let via = listener_egid.filter(|g| is_project_with(dir, *g, *from_uid, *to));
                let key = format!("{proto} {src} {dst}");
                c.add(Channel::Network, *from_uid, *to, key, via, idx);
            }
            Body::Read { uid, path, granted: true, owner, group, mode, acl } => {
                let via = dir.shared_project_groups(*owner, *uid).into_iter().find(|g| {
                    (g == group && mode.group().contains(Perms::R))
                        || acl.iter().any(|e| e.gid == *g && e.perms.contains(Perms::R))
                });
                c.add(Channel::File, *owner, *uid, path.clone(), via, idx);
            }
            Body::Ps { host, pid, uid, groups, visible } => {
                let via = exempt
                    .get(host.as_str())
                    .copied()
                    .flatten()
                    .filter(|g| groups.contains(g));
                for p in visible {
                    c.add(Channel::ProcessListing, p.uid, *uid, format!("{host} {pid} {}", p.pid), via, idx);
                }
            }
            Body::Squeue { uid, visible } => {
                for j in visible {
                    c.add(Channel::JobListing, j.uid, *uid, format!("job {}", j.job), None, idx);
                }
            }
            Body::JobStart { uid, node, co_resident, .. } => {
                for other in co_resident {
                    c.add(Channel::CoResidency, *other, *uid, node.clone(), None, idx);
                }
            }
            Body::Ssh { uid, node, allowed: true, residents } => {
                for other in residents {
                    c.add(Channel::CoResidency, *other, *uid, node.clone(), None, idx);
                }
            }
            Body::GpuAssign { node, dev, uid, dirty_from: Some(prev), .. } => {
                c.add(Channel::GpuResidue, *prev, *uid, format!("{node} gpu{dev} @{idx}"), None, idx);
            }
            _ => {}
        }
    }

    let mut violations = vec![];
    let mut mediated = vec![];
    for ((channel, from_uid, to_uid, _), (via, evidence)) in c.instances {
        match via {
            Some(via) => mediated.push(Mediated { channel, from_uid, to_uid, via, evidence }),
            None => violations.push(Violation { channel, from_uid, to_uid, evidence }),
        }
    }
    violations.sort_by_key(|v| v.evidence[0]);
    mediated.sort_by_key(|m| m.evidence[0]);

    let decl = &scenario.file.residual_declarations;
    let mut residual_channels = vec![];
    for d in &decl.world_writable_dirs {
        residual_channels.push(ResidualChannel { kind: ResidualKind::WorldWritableDirNames, detail: d.clone() });
    }
    for s in &decl.abstract_sockets {
        residual_channels.push(ResidualChannel {
            kind: ResidualKind::AbstractUds,
            detail: format!("{} @{}", s.host, s.name),
        });
    }
    for f in &decl.raw_ib_flows {
        residual_channels.push(ResidualChannel {
            kind: ResidualKind::RawIbVerbs,
            detail: format!("{} -> {}", f.from_host, f.to_host),
        });
    }

    let summary = Summary {
        records: trace.len(),
        cross_user_flows: violations.len() + mediated.len(),
        violations: violations.len(),
        mediated: mediated.len(),
        residual: residual_channels.len(),
    };
    Ok(IsolationReport { violations, mediated, residual_channels, summary })
}
