//! Scenario file schema, loading and validation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::directory::{Directory, GroupId, GroupKind, UserId};
use crate::host::{Host, Pid, SocketRole};
use crate::ident::Registry;
use crate::net::{Endpoint, Proto};
use crate::perm::{AclEntry, FileSystem, FsNode, Mode, NodeKind, Perms, SMASK_NORMAL};
use crate::sched::{Cluster, JobId, JobSpec, Node, SchedPolicy};
use crate::ubf::{EngineConfig, Millis};

use super::SimError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserDecl {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uid: Option<u32>,
    /// Whitelisted for `smask_relax`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub support: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupDecl {
    pub name: String,
    #[serde(default = "project_kind")]
    pub kind: GroupKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gid: Option<u32>,
    #[serde(default)]
    pub members: Vec<String>,
}

fn project_kind() -> GroupKind {
    GroupKind::Project
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessDecl {
    pub pid: u32,
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default)]
    pub cmdline: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SocketDecl {
    pub pid: u32,
    pub proto: Proto,
    pub port: u16,
    #[serde(default = "listener_role")]
    pub role: SocketRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<Endpoint>,
}

fn listener_role() -> SocketRole {
    SocketRole::Listener
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdentService {
    #[default]
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostDecl {
    pub id: String,
    /// Address token used on the wire; defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exempt_group: Option<String>,
    /// Compute nodes have cores; login/service hosts have none.
    #[serde(default)]
    pub cores: u32,
    #[serde(default)]
    pub gpus: u32,
    #[serde(default)]
    pub ident: IdentService,
    #[serde(default = "default_latency")]
    pub ident_latency_ms: u64,
    #[serde(default)]
    pub processes: Vec<ProcessDecl>,
    #[serde(default)]
    pub sockets: Vec<SocketDecl>,
}

fn default_latency() -> u64 {
    1
}

impl HostDecl {
    pub fn address(&self) -> &str {
        self.address.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AclDecl {
    pub group: String,
    pub perms: Perms,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDecl {
    pub path: String,
    pub kind: NodeKind,
    pub owner: String,
    pub group: String,
    pub mode: Mode,
    #[serde(default)]
    pub acl: Vec<AclDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobDecl {
    pub id: u64,
    pub user: String,
    pub cores: u32,
    #[serde(default)]
    pub gpus: u32,
    /// Milliseconds of simulated time.
    pub submit_t: Millis,
    pub duration_s: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub smask: bool,
    pub hidepid: bool,
    pub whole_node: bool,
    pub gpu_epilog: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { smask: true, hidepid: true, whole_node: true, gpu_epilog: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractSocketDecl {
    pub host: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawIbFlowDecl {
    pub from_host: String,
    pub to_host: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualDecls {
    pub world_writable_dirs: Vec<String>,
    pub abstract_sockets: Vec<AbstractSocketDecl>,
    pub raw_ib_flows: Vec<RawIbFlowDecl>,
}

fn default_umask() -> Mode {
    Mode::new(0o022)
}

fn default_tcp() -> Proto {
    Proto::Tcp
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Spawn {
        host: String,
        pid: u32,
        user: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        group: Option<String>,
        #[serde(default)]
        cmdline: String,
    },
    Bind {
        host: String,
        pid: u32,
        #[serde(default = "default_tcp")]
        proto: Proto,
        port: u16,
        #[serde(default = "listener_role")]
        role: SocketRole,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        remote: Option<Endpoint>,
    },
    Newgrp {
        host: String,
        pid: u32,
        group: String,
    },
    Connect {
        host: String,
        pid: u32,
        dst_host: String,
        dst_port: u16,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        src_port: Option<u16>,
        /// Data packets sent after the SYN.
        #[serde(default)]
        packets: u32,
    },
    SendUdp {
        host: String,
        pid: u32,
        dst_host: String,
        dst_port: u16,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        src_port: Option<u16>,
        #[serde(default = "one")]
        count: u32,
    },
    Create {
        user: String,
        parent: String,
        name: String,
        #[serde(default = "file_kind")]
        node: NodeKind,
        mode: Mode,
        #[serde(default = "default_umask")]
        umask: Mode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        group: Option<String>,
        #[serde(default)]
        relaxed: bool,
    },
    Chmod {
        user: String,
        path: String,
        mode: Mode,
        #[serde(default)]
        relaxed: bool,
    },
    Setacl {
        user: String,
        path: String,
        group: String,
        perms: Perms,
    },
    Read {
        user: String,
        path: String,
    },
    Ps {
        host: String,
        pid: u32,
    },
    Squeue {
        user: String,
    },
    Ssh {
        user: String,
        node: String,
    },
    SubmitJob {
        id: u64,
        user: String,
        cores: u32,
        #[serde(default)]
        gpus: u32,
        duration_s: u64,
    },
    Tick,
}

fn file_kind() -> NodeKind {
    NodeKind::File
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Spawn { .. } => "spawn",
            Action::Bind { .. } => "bind",
            Action::Newgrp { .. } => "newgrp",
            Action::Connect { .. } => "connect",
            Action::SendUdp { .. } => "send_udp",
            Action::Create { .. } => "create",
            Action::Chmod { .. } => "chmod",
            Action::Setacl { .. } => "setacl",
            Action::Read { .. } => "read",
            Action::Ps { .. } => "ps",
            Action::Squeue { .. } => "squeue",
            Action::Ssh { .. } => "ssh",
            Action::SubmitJob { .. } => "submit_job",
            Action::Tick => "tick",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventDecl {
    pub t: Millis,
    #[serde(flatten)]
    pub action: Action,
}

/// The on-disk document. Every top-level key is optional.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioFile {
    pub users: Vec<UserDecl>,
    pub groups: Vec<GroupDecl>,
    pub hosts: Vec<HostDecl>,
    pub files: Vec<FileDecl>,
    pub jobs: Vec<JobDecl>,
    pub engine: EngineConfig,
    pub toggles: Toggles,
    pub residual_declarations: ResidualDecls,
    pub events: Vec<EventDecl>,
}

/// Initial simulator state built from a scenario.
#[derive(Debug, Clone)]
pub struct World {
    pub directory: Directory,
    pub hosts: Vec<Host>,
    pub fs: FileSystem,
    pub cluster: Cluster,
    /// Host index to scheduler node index.
    pub host_nodes: BTreeMap<usize, usize>,
}

impl World {
    pub fn host_index(&self, id: &str) -> Option<usize> {
        self.hosts.iter().position(|h| h.id == id)
    }

    pub fn host_by_address(&self, addr: &str) -> Option<usize> {
        self.hosts.iter().position(|h| h.address == addr)
    }
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub file: ScenarioFile,
    digest: String,
}

fn invalid(path: impl Into<String>, msg: impl std::fmt::Display) -> SimError {
    SimError::Invalid { path: path.into(), message: msg.to_string() }
}

impl Scenario {
    pub fn from_file(file: ScenarioFile) -> Result<Self, SimError> {
        let canonical = serde_json::to_vec(&file).expect("scenario serializes");
        let digest = Sha256::digest(&canonical)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>();
        let scenario = Scenario { file, digest };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let file: ScenarioFile = serde_json::from_str(text)
            .map_err(|e| SimError::Parse { line: e.line(), column: e.column(), message: e.to_string() })?;
        Self::from_file(file)
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn validate(&self) -> Result<(), SimError> {
        let world = self.build_world()?;
        let f = &self.file;
        let mut last = 0;
        for (i, ev) in f.events.iter().enumerate() {
            let at = format!("events[{i}]");
            if ev.t < last {
                return Err(invalid(format!("{at}.t"), format!("time {} is before {}", ev.t, last)));
            }
            last = ev.t;
            self.validate_refs(&world, &at, &ev.action)?;
        }
        let mut job_ids: BTreeSet<u64> = f.jobs.iter().map(|j| j.id).collect();
        for (i, ev) in f.events.iter().enumerate() {
            if let Action::SubmitJob { id, .. } = ev.action {
                if !job_ids.insert(id) {
                    return Err(invalid(format!("events[{i}].id"), format!("duplicate job id {id}")));
                }
            }
        }
        for (i, d) in f.residual_declarations.abstract_sockets.iter().enumerate() {
            if world.host_index(&d.host).is_none() {
                return Err(invalid(
                    format!("residual_declarations.abstract_sockets[{i}].host"),
                    format!("unknown host {:?}", d.host),
                ));
            }
        }
        for (i, d) in f.residual_declarations.raw_ib_flows.iter().enumerate() {
            for (field, h) in [("from_host", &d.from_host), ("to_host", &d.to_host)] {
                if world.host_index(h).is_none() {
                    return Err(invalid(
                        format!("residual_declarations.raw_ib_flows[{i}].{field}"),
                        format!("unknown host {h:?}"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn validate_refs(&self, w: &World, at: &str, action: &Action) -> Result<(), SimError> {
        let user = |name: &str| {
            w.directory
                .user_by_name(name)
                .map(|_| ())
                .map_err(|e| invalid(format!("{at}.user"), e))
        };
        let group = |field: &str, name: &str| {
            w.directory
                .group_by_name(name)
                .map(|_| ())
                .map_err(|e| invalid(format!("{at}.{field}"), e))
        };
        let host = |field: &str, id: &str| {
            w.host_index(id)
                .map(|_| ())
                .ok_or_else(|| invalid(format!("{at}.{field}"), format!("unknown host {id:?}")))
        };
        match action {
            Action::Spawn { host: h, user: u, group: g, .. } => {
                host("host", h)?;
                user(u)?;
                if let Some(g) = g {
                    group("group", g)?;
                }
            }
            Action::Bind { host: h, .. } | Action::Ps { host: h, .. } => host("host", h)?,
            Action::Newgrp { host: h, group: g, .. } => {
                host("host", h)?;
                group("group", g)?;
            }
            Action::Connect { host: h, dst_host, .. } | Action::SendUdp { host: h, dst_host, .. } => {
                host("host", h)?;
                host("dst_host", dst_host)?;
            }
            Action::Create { user: u, group: g, .. } => {
                user(u)?;
                if let Some(g) = g {
                    group("group", g)?;
                }
            }
            Action::Chmod { user: u, .. } | Action::Read { user: u, .. } | Action::Squeue { user: u } => user(u)?,
            Action::Setacl { user: u, group: g, .. } => {
                user(u)?;
                group("group", g)?;
            }
            Action::Ssh { user: u, node } => {
                user(u)?;
                let idx = w
                    .host_index(node)
                    .ok_or_else(|| invalid(format!("{at}.node"), format!("unknown host {node:?}")))?;
                if !w.host_nodes.contains_key(&idx) {
                    return Err(invalid(format!("{at}.node"), format!("{node:?} is not a compute node")));
                }
            }
            Action::SubmitJob { user: u, .. } => user(u)?,
            Action::Tick => {}
        }
        Ok(())
    }

    /// Builds the initial state: directory, hosts, filesystem (with homes) and scheduler nodes.
    pub fn build_world(&self) -> Result<World, SimError> {
        let f = &self.file;
        let mut dir = Directory::new();
        if !f.users.iter().any(|u| u.name == "root" || u.uid == Some(0)) {
            dir.create_user_with_uid("root", UserId::ROOT).expect("fresh directory");
        }
        for (i, u) in f.users.iter().enumerate() {
            let res = match u.uid {
                Some(uid) => dir.create_user_with_uid(&u.name, UserId(uid)),
                None => dir.create_user(&u.name),
            };
            res.map_err(|e| invalid(format!("users[{i}]"), e))?;
        }
        for (i, g) in f.groups.iter().enumerate() {
            let gid = match g.gid {
                Some(gid) => dir.create_group_with_gid(&g.name, g.kind, GroupId(gid)),
                None => dir.create_group(&g.name, g.kind),
            }
            .map_err(|e| invalid(format!("groups[{i}]"), e))?
            .gid;
            for (j, m) in g.members.iter().enumerate() {
                let uid = dir
                    .user_by_name(m)
                    .map_err(|e| invalid(format!("groups[{i}].members[{j}]"), e))?
                    .uid;
                dir.add_member(gid, uid).map_err(|e| invalid(format!("groups[{i}].members[{j}]"), e))?;
            }
        }

        let mut fs = FileSystem::new();
        fs.set_smask_policy(if f.toggles.smask { SMASK_NORMAL } else { Mode::new(0) });
        let regular: Vec<UserId> = dir.users().map(|u| u.uid).filter(|u| !u.is_root()).collect();
        for uid in regular {
            fs.init_home(&dir, uid).map_err(|e| invalid("users", e))?;
        }
        for u in &f.users {
            if u.support {
                fs.add_support_user(dir.user_by_name(&u.name).unwrap().uid);
            }
        }
        for (i, fd) in f.files.iter().enumerate() {
            let at = format!("files[{i}]");
            let owner = dir.user_by_name(&fd.owner).map_err(|e| invalid(format!("{at}.owner"), e))?.uid;
            let group = dir.group_by_name(&fd.group).map_err(|e| invalid(format!("{at}.group"), e))?.gid;
            let mut acl = vec![];
            for (j, a) in fd.acl.iter().enumerate() {
                let gid = dir
                    .group_by_name(&a.group)
                    .map_err(|e| invalid(format!("{at}.acl[{j}].group"), e))?
                    .gid;
                acl.push(AclEntry { gid, perms: a.perms });
            }
            acl.sort();
            fs.insert_node(FsNode { path: fd.path.clone(), kind: fd.kind, owner, group, mode: fd.mode, acl })
                .map_err(|e| invalid(format!("{at}.path"), e))?;
        }

        let mut hosts = vec![];
        let mut cluster = Cluster::new(SchedPolicy { whole_node: f.toggles.whole_node, gpu_epilog: f.toggles.gpu_epilog });
        let mut host_nodes = BTreeMap::new();
        let mut addresses = BTreeSet::new();
        for (i, hd) in f.hosts.iter().enumerate() {
            let at = format!("hosts[{i}]");
            if hosts.iter().any(|h: &Host| h.id == hd.id) {
                return Err(invalid(format!("{at}.id"), format!("duplicate host {:?}", hd.id)));
            }
            if !crate::net::is_valid_addr(hd.address()) {
                return Err(invalid(format!("{at}.address"), format!("bad address token {:?}", hd.address())));
            }
            if !addresses.insert(hd.address().to_owned()) {
                return Err(invalid(format!("{at}.address"), format!("duplicate address {:?}", hd.address())));
            }
            let mut host = Host::new(hd.id.clone(), hd.address());
            host.hidepid = f.toggles.hidepid;
            if let Some(g) = &hd.exempt_group {
                let gid = dir.group_by_name(g).map_err(|e| invalid(format!("{at}.exempt_group"), e))?.gid;
                host.exempt_gid = Some(gid);
            }
            for (j, p) in hd.processes.iter().enumerate() {
                let pat = format!("{at}.processes[{j}]");
                let user = dir.user_by_name(&p.user).map_err(|e| invalid(format!("{pat}.user"), e))?;
                let egid = match &p.group {
                    Some(g) => dir.group_by_name(g).map_err(|e| invalid(format!("{pat}.group"), e))?.gid,
                    None => user.upg,
                };
                host.spawn_process_with_pid(&dir, Pid(p.pid), user.uid, egid, &p.cmdline)
                    .map_err(|e| invalid(pat, e))?;
            }
            for (j, s) in hd.sockets.iter().enumerate() {
                host.bind_socket(Pid(s.pid), s.proto, s.port, s.role, s.remote.clone())
                    .map_err(|e| invalid(format!("{at}.sockets[{j}]"), e))?;
            }
            if hd.cores > 0 {
                let node = cluster
                    .add_node(Node::new(hd.id.clone(), hd.cores, hd.gpus))
                    .map_err(|e| invalid(at.clone(), e))?;
                host_nodes.insert(hosts.len(), node);
            } else if hd.gpus > 0 {
                return Err(invalid(format!("{at}.gpus"), "GPUs need a compute node (cores > 0)"));
            }
            hosts.push(host);
        }

        let mut ids = BTreeSet::new();
        for (i, j) in f.jobs.iter().enumerate() {
            let at = format!("jobs[{i}]");
            if !ids.insert(j.id) {
                return Err(invalid(format!("{at}.id"), format!("duplicate job id {}", j.id)));
            }
            let uid = dir.user_by_name(&j.user).map_err(|e| invalid(format!("{at}.user"), e))?.uid;
            // Submit into a scratch cluster to surface unsatisfiable requests now.
            let mut scratch = Cluster::new(cluster.policy());
            for n in cluster.nodes() {
                scratch.add_node(Node::new(n.id.clone(), n.cores_total, n.gpus.len() as u32)).unwrap();
            }
            scratch
                .submit(&dir, JobSpec { id: JobId(j.id), uid, cores: j.cores, gpus: j.gpus, duration_ms: j.duration_s * 1000 })
                .map_err(|e| invalid(at, e))?;
        }

        Ok(World { directory: dir, hosts, fs, cluster, host_nodes })
    }
}

impl Scenario {
    /// Responder state for one host: the named one, or the first declared.
    pub fn registry(&self, host: Option<&str>) -> Result<Registry, SimError> {
        let mut world = self.build_world()?;
        let idx = match host {
            Some(id) => world.host_index(id).ok_or_else(|| invalid("hosts", format!("unknown host {id:?}")))?,
            None if world.hosts.is_empty() => return Err(invalid("hosts", "no hosts declared")),
            None => 0,
        };
        Ok(Registry { directory: world.directory, host: world.hosts.swap_remove(idx) })
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, SimError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SimError::Io { path: path.display().to_string(), message: e.to_string() })?;
    Scenario::from_json(&text)
}
