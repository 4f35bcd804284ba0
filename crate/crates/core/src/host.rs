//! Per-host process table, socket ownership and process visibility.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directory::{Directory, DirectoryError, GroupId, UserId};
use crate::net::{Endpoint, Proto};

pub const FIRST_PID: u32 = 100;
pub const EPHEMERAL_PORT_BASE: u16 = 40000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pid(pub u32);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Process {
    pub pid: Pid,
    pub uid: UserId,
    pub egid: GroupId,
    /// Supplemental groups as they were at spawn time.
    pub supplemental: BTreeSet<GroupId>,
    pub cmdline: String,
}

impl Process {
    pub fn in_group(&self, gid: GroupId) -> bool {
        self.egid == gid || self.supplemental.contains(&gid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SocketRole {
    #[serde(rename = "LISTENER")]
    Listener,
    #[serde(rename = "OUTBOUND")]
    Outbound,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Socket {
    pub proto: Proto,
    pub local_port: u16,
    pub role: SocketRole,
    pub remote: Option<Endpoint>,
    pub owner_pid: Pid,
}

/// Who owns a socket, read from the live process table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocketOwner {
    pub uid: UserId,
    pub egid: GroupId,
    pub username: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HostError {
    #[error(transparent)]
    Directory(#[from] DirectoryError),
    #[error("gid {egid} is not one of uid {uid}'s groups")]
    NotInGroup { uid: UserId, egid: GroupId },
    #[error("no process {0}")]
    UnknownPid(Pid),
    #[error("pid {0} already exists")]
    DuplicatePid(Pid),
    #[error("pid must be positive")]
    ZeroPid,
    #[error("{proto} port {port} already has a listener")]
    PortInUse { proto: Proto, port: u16 },
    #[error("{proto} port {port} already connected to {remote}")]
    DuplicateOutbound { proto: Proto, port: u16, remote: Endpoint },
    #[error("outbound sockets need a remote endpoint")]
    MissingRemote,
    #[error("listener sockets cannot have a remote endpoint")]
    UnexpectedRemote,
    #[error("no free ephemeral {0} port")]
    PortsExhausted(Proto),
}

#[derive(Debug, Clone)]
pub struct Host {
    pub id: String,
    pub address: String,
    pub exempt_gid: Option<GroupId>,
    /// When false every viewer sees every process (hidepid disabled).
    pub hidepid: bool,
    processes: BTreeMap<Pid, Process>,
    sockets: Vec<Socket>,
}

impl Host {
    pub fn new(id: impl Into<String>, address: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            address: address.into(),
            exempt_gid: None,
            hidepid: true,
            processes: BTreeMap::new(),
            sockets: Vec::new(),
        }
    }

    pub fn with_exempt_gid(mut self, gid: GroupId) -> Self {
        self.exempt_gid = Some(gid);
        self
    }

    pub fn spawn_process(
        &mut self,
        dir: &Directory,
        uid: UserId,
        egid: GroupId,
        cmdline: &str,
    ) -> Result<Pid, HostError> {
        let pid = self
            .processes
            .keys()
            .next_back()
            .map_or(Pid(FIRST_PID), |p| Pid(p.0 + 1));
        self.spawn_process_with_pid(dir, pid, uid, egid, cmdline)?;
        Ok(pid)
    }

    pub fn spawn_process_with_pid(
        &mut self,
        dir: &Directory,
        pid: Pid,
        uid: UserId,
        egid: GroupId,
        cmdline: &str,
    ) -> Result<(), HostError> {
        if pid.0 == 0 {
            return Err(HostError::ZeroPid);
        }
        if self.processes.contains_key(&pid) {
            return Err(HostError::DuplicatePid(pid));
        }
        if !dir.effective_groups(uid)?.contains(&egid) {
            return Err(HostError::NotInGroup { uid, egid });
        }
        let supplemental = dir.user(uid)?.supplemental.clone();
        self.processes.insert(
            pid,
            Process {
                pid,
                uid,
                egid,
                supplemental,
                cmdline: cmdline.to_owned(),
            },
        );
        Ok(())
    }

    /// `newgrp`/`sg`: switch the primary group to another group the user belongs to.
    pub fn set_primary_group(
        &mut self,
        dir: &Directory,
        pid: Pid,
        gid: GroupId,
    ) -> Result<(), HostError> {
        let proc = self.processes.get_mut(&pid).ok_or(HostError::UnknownPid(pid))?;
        if !dir.effective_groups(proc.uid)?.contains(&gid) {
            return Err(HostError::NotInGroup { uid: proc.uid, egid: gid });
        }
        proc.egid = gid;
        Ok(())
    }

    pub fn bind_socket(
        &mut self,
        pid: Pid,
        proto: Proto,
        port: u16,
        role: SocketRole,
        remote: Option<Endpoint>,
    ) -> Result<&Socket, HostError> {
        if !self.processes.contains_key(&pid) {
            return Err(HostError::UnknownPid(pid));
        }
        match (role, &remote) {
            (SocketRole::Listener, Some(_)) => return Err(HostError::UnexpectedRemote),
            (SocketRole::Outbound, None) => return Err(HostError::MissingRemote),
            _ => {}
        }
        let clash = self.sockets.iter().any(|s| {
            s.proto == proto && s.local_port == port && s.role == role && s.remote == remote
        });
        if clash {
            return Err(match remote {
                None => HostError::PortInUse { proto, port },
                Some(remote) => HostError::DuplicateOutbound { proto, port, remote },
            });
        }
        self.sockets.push(Socket {
            proto,
            local_port: port,
            role,
            remote,
            owner_pid: pid,
        });
        Ok(self.sockets.last().unwrap())
    }

    /// Lowest port at or above [`EPHEMERAL_PORT_BASE`] with no socket of `proto` on it.
    pub fn ephemeral_port(&self, proto: Proto) -> Result<u16, HostError> {
        let used: BTreeSet<u16> = self
            .sockets
            .iter()
            .filter(|s| s.proto == proto)
            .map(|s| s.local_port)
            .collect();
        (EPHEMERAL_PORT_BASE..=u16::MAX)
            .find(|p| !used.contains(p))
            .ok_or(HostError::PortsExhausted(proto))
    }

    pub fn find_socket(
        &self,
        proto: Proto,
        local_port: u16,
        role: SocketRole,
        remote: Option<&Endpoint>,
    ) -> Option<&Socket> {
        self.sockets.iter().find(|s| {
            s.proto == proto
                && s.local_port == local_port
                && s.role == role
                && (role == SocketRole::Listener || s.remote.as_ref() == remote)
        })
    }

    /// Attribution is taken from the owning process as it is now, so a
    /// `newgrp` after bind is reflected in the answer.
    pub fn lookup_socket_owner(
        &self,
        dir: &Directory,
        proto: Proto,
        local_port: u16,
        role: SocketRole,
        remote: Option<&Endpoint>,
    ) -> Option<SocketOwner> {
        let socket = self.find_socket(proto, local_port, role, remote)?;
        let proc = self.processes.get(&socket.owner_pid)?;
        let username = dir.user(proc.uid).ok()?.username.clone();
        Some(SocketOwner {
            uid: proc.uid,
            egid: proc.egid,
            username,
        })
    }

    fn can_see(&self, viewer: &Process, target: &Process) -> bool {
        !self.hidepid
            || viewer.uid == target.uid
            || viewer.uid.is_root()
            || self.exempt_gid.is_some_and(|g| viewer.in_group(g))
    }

    /// What `/proc` shows `viewer_pid` under hidepid=2 with the seepid exemption.
    pub fn list_visible_processes(&self, viewer_pid: Pid) -> Result<BTreeSet<Pid>, HostError> {
        let viewer = self.process(viewer_pid)?;
        Ok(self
            .processes
            .values()
            .filter(|p| self.can_see(viewer, p))
            .map(|p| p.pid)
            .collect())
    }

    /// Command line of `target`, if `viewer_pid` may see it.
    pub fn visible_cmdline(&self, viewer_pid: Pid, target: Pid) -> Result<Option<&str>, HostError> {
        let viewer = self.process(viewer_pid)?;
        Ok(self
            .processes
            .get(&target)
            .filter(|p| self.can_see(viewer, p))
            .map(|p| p.cmdline.as_str()))
    }

    pub fn process(&self, pid: Pid) -> Result<&Process, HostError> {
        self.processes.get(&pid).ok_or(HostError::UnknownPid(pid))
    }

    pub fn processes(&self) -> impl Iterator<Item = &Process> {
        self.processes.values()
    }

    pub fn sockets(&self) -> &[Socket] {
        &self.sockets
    }
}
