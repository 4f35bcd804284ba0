//! JSON Lines trace records. Field order is fixed by declaration order.

use std::collections::BTreeSet;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::directory::{GroupId, UserId};
use crate::host::{Pid, SocketRole};
use crate::net::{Endpoint, Proto};
use crate::perm::{AclEntry, Mode, NodeKind, Perms};
use crate::sched::JobId;
use crate::ubf::{Decision, Millis, PacketAction, PacketKind, Reason};

use super::scenario::Toggles;
use super::SimError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: Millis,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcView {
    pub pid: Pid,
    pub uid: UserId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobView {
    pub job: JobId,
    pub uid: UserId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Body {
    Setup {
        scenario: String,
        seed: u64,
        users: usize,
        groups: usize,
        hosts: usize,
        nodes: usize,
        toggles: Toggles,
    },
    Spawn {
        host: String,
        pid: Pid,
        uid: UserId,
        egid: GroupId,
    },
    Bind {
        host: String,
        pid: Pid,
        proto: Proto,
        port: u16,
        role: SocketRole,
    },
    Newgrp {
        host: String,
        pid: Pid,
        uid: UserId,
        egid: GroupId,
    },
    Verdict {
        verdict: Decision,
        reason: Reason,
        host: String,
        proto: Proto,
        src: Endpoint,
        dst: Endpoint,
    },
    /// One packet arriving at `host`. The uids are ground truth from the
    /// simulator, not what the firewall learned.
    Packet {
        host: String,
        proto: Proto,
        src: Endpoint,
        dst: Endpoint,
        kind: PacketKind,
        action: PacketAction,
        from_uid: UserId,
        to_uid: Option<UserId>,
        listener_egid: Option<GroupId>,
    },
    Create {
        uid: UserId,
        path: String,
        node: NodeKind,
        group: GroupId,
        mode: Mode,
    },
    Chmod {
        uid: UserId,
        path: String,
        mode: Mode,
    },
    Setacl {
        uid: UserId,
        path: String,
        gid: GroupId,
        perms: Perms,
    },
    Read {
        uid: UserId,
        path: String,
        granted: bool,
        owner: UserId,
        group: GroupId,
        mode: Mode,
        acl: Vec<AclEntry>,
    },
    Ps {
        host: String,
        pid: Pid,
        uid: UserId,
        groups: BTreeSet<GroupId>,
        visible: Vec<ProcView>,
    },
    Squeue {
        uid: UserId,
        visible: Vec<JobView>,
    },
    Ssh {
        uid: UserId,
        node: String,
        allowed: bool,
        residents: BTreeSet<UserId>,
    },
    JobSubmit {
        job: JobId,
        uid: UserId,
    },
    JobStart {
        job: JobId,
        uid: UserId,
        node: String,
        cores: u32,
        co_resident: BTreeSet<UserId>,
    },
    JobEnd {
        job: JobId,
        uid: UserId,
        node: String,
    },
    GpuAssign {
        node: String,
        dev: u32,
        uid: UserId,
        group: GroupId,
        dirty_from: Option<UserId>,
    },
    GpuDirty {
        node: String,
        dev: u32,
        uid: UserId,
    },
    GpuClear {
        node: String,
        dev: u32,
    },
    GpuRelease {
        node: String,
        dev: u32,
    },
    FlowExpire {
        host: String,
        count: usize,
    },
    Rejected {
        action: String,
        error: String,
    },
}

pub fn write_trace(records: &[TraceRecord], mut out: impl Write) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Parses JSON Lines; blank lines are skipped. Line numbers in errors are 1-based.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, SimError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SimError::BadTrace { line: i + 1, message: e.to_string() })
        })
        .collect()
}
