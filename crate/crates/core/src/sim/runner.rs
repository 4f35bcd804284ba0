//! The event loop.

use std::collections::BTreeSet;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::directory::{Directory, UserId};
use crate::host::{Host, Pid, SocketRole};
use crate::ident::{encode_response, respond_line, IdentTransport, TransportFailure};
use crate::net::{Endpoint, Proto};
use crate::perm::{Perms, Session};
use crate::sched::{JobId, JobSpec, SchedEvent};
use crate::ubf::{decide, ConnectionEvent, FlowTable, Millis, PacketKind};

use super::scenario::{Action, EventDecl, IdentService, Scenario, World};
use super::trace::{Body, JobView, ProcView, TraceRecord};
use super::SimError;

/// Delivers identity queries between simulated hosts.
pub struct SimTransport<'a> {
    pub hosts: &'a [Host],
    pub directory: &'a Directory,
    /// Per host, parallel to `hosts`: service state and reply latency.
    pub ident: &'a [(IdentService, Millis)],
}

impl IdentTransport for SimTransport<'_> {
    fn exchange(&self, peer: &str, request: &[u8], timeout: Duration) -> Result<Vec<u8>, TransportFailure> {
        let idx = self
            .hosts
            .iter()
            .position(|h| h.address == peer)
            .ok_or_else(|| TransportFailure::Failed(format!("no route to {peer}")))?;
        let (service, latency) = self.ident[idx];
        if service == IdentService::Down {
            return Err(TransportFailure::Failed("connection refused".into()));
        }
        if Duration::from_millis(latency) >= timeout {
            return Err(TransportFailure::TimedOut);
        }
        let reply = respond_line(&self.hosts[idx], self.directory, request);
        encode_response(&reply).map_err(|e| TransportFailure::Failed(e.to_string()))
    }
}

struct Sim<'a> {
    scenario: &'a Scenario,
    world: World,
    tables: Vec<FlowTable>,
    trace: Vec<TraceRecord>,
    completions: BTreeSet<(Millis, JobId)>,
    now: Millis,
}

/// Runs `scenario` to completion. The seed only orders events that share a timestamp.
pub fn run(scenario: &Scenario, seed: u64) -> Result<Vec<TraceRecord>, SimError> {
    let world = scenario.build_world()?;
    let f = &scenario.file;
    let tables = world.hosts.iter().map(|_| FlowTable::new(&f.engine)).collect();
    let mut sim = Sim { scenario, world, tables, trace: vec![], completions: BTreeSet::new(), now: 0 };
    sim.push(Body::Setup {
        scenario: scenario.digest().to_owned(),
        seed,
        users: sim.world.directory.users().count(),
        groups: sim.world.directory.groups().count(),
        hosts: sim.world.hosts.len(),
        nodes: sim.world.cluster.nodes().len(),
        toggles: f.toggles,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs: Vec<_> = f.jobs.iter().collect();
    jobs.sort_by_key(|j| j.submit_t);
    let events = &f.events;
    let (mut ev_i, mut job_i) = (0, 0);
    loop {
        let next = [
            events.get(ev_i).map(|e| e.t),
            jobs.get(job_i).map(|j| j.submit_t),
            sim.completions.first().map(|c| c.0),
        ]
        .into_iter()
        .flatten()
        .min();
        let Some(now) = next else { break };
        sim.now = now;

        while let Some(&(t, id)) = sim.completions.first() {
            if t != now {
                break;
            }
            sim.completions.pop_first();
            let res = sim.world.cluster.complete_job(id, now);
            sim.record_result("complete_job", res.map_err(|e| e.to_string()));
            sim.drain_sched();
        }
        while let Some(j) = jobs.get(job_i).filter(|j| j.submit_t == now) {
            job_i += 1;
            let res = sim.submit(j.id, &j.user, j.cores, j.gpus, j.duration_s);
            sim.record_result("submit_job", res);
        }
        sim.schedule();
        sim.expire();

        let start = ev_i;
        while events.get(ev_i).is_some_and(|e| e.t == now) {
            ev_i += 1;
        }
        let mut batch: Vec<&EventDecl> = events[start..ev_i].iter().collect();
        batch.shuffle(&mut rng);
        for ev in batch {
            let res = sim.apply(&ev.action);
            sim.record_result(ev.action.name(), res);
        }
    }
    Ok(sim.trace)
}

impl Sim<'_> {
    fn push(&mut self, body: Body) {
        self.trace.push(TraceRecord { t: self.now, body });
    }

    fn record_result(&mut self, action: &str, res: Result<(), String>) {
        if let Err(error) = res {
            self.push(Body::Rejected { action: action.to_owned(), error });
        }
    }

    fn uid(&self, name: &str) -> Result<UserId, String> {
        self.world.directory.user_by_name(name).map(|u| u.uid).map_err(|e| e.to_string())
    }

    fn host(&self, id: &str) -> Result<usize, String> {
        self.world.host_index(id).ok_or_else(|| format!("unknown host {id:?}"))
    }

    fn node_name(&self, idx: usize) -> String {
        self.world.cluster.nodes()[idx].id.clone()
    }

    fn submit(&mut self, id: u64, user: &str, cores: u32, gpus: u32, duration_s: u64) -> Result<(), String> {
        let uid = self.uid(user)?;
        let spec = JobSpec { id: JobId(id), uid, cores, gpus, duration_ms: duration_s * 1000 };
        let res = self.world.cluster.submit(&self.world.directory, spec).map_err(|e| e.to_string());
        self.drain_sched();
        res
    }

    fn schedule(&mut self) {
        for p in self.world.cluster.schedule_step(self.now) {
            let dur = self.world.cluster.job(p.job).map(|j| j.duration_ms).unwrap_or(0);
            self.completions.insert((self.now + dur, p.job));
        }
        self.drain_sched();
    }

    fn expire(&mut self) {
        for i in 0..self.tables.len() {
            let count = self.tables[i].expire_flows(self.now);
            if count > 0 {
                let host = self.world.hosts[i].id.clone();
                self.push(Body::FlowExpire { host, count });
            }
        }
    }

    fn drain_sched(&mut self) {
        for ev in self.world.cluster.drain_events() {
            let body = match ev {
                SchedEvent::Submitted { job, uid } => Body::JobSubmit { job, uid },
                SchedEvent::Placed { job, uid, node, cores, co_resident } => {
                    Body::JobStart { job, uid, node: self.node_name(node), cores, co_resident }
                }
                SchedEvent::GpuAssigned { node, dev, uid, group, dirty_from } => {
                    Body::GpuAssign { node: self.node_name(node), dev, uid, group, dirty_from }
                }
                SchedEvent::Completed { job, uid, node } => Body::JobEnd { job, uid, node: self.node_name(node) },
                SchedEvent::GpuDirtied { node, dev, uid } => Body::GpuDirty { node: self.node_name(node), dev, uid },
                SchedEvent::GpuCleared { node, dev } => Body::GpuClear { node: self.node_name(node), dev },
                SchedEvent::GpuReleased { node, dev } => Body::GpuRelease { node: self.node_name(node), dev },
            };
            self.push(body);
        }
    }

    fn session(&self, user: &str, umask: crate::perm::Mode, group: Option<&str>, relaxed: bool) -> Result<Session, String> {
        let uid = self.uid(user)?;
        let w = &self.world;
        let mut s = w.fs.open_session(&w.directory, uid, umask).map_err(|e| e.to_string())?;
        if let Some(g) = group {
            let gid = w.directory.group_by_name(g).map_err(|e| e.to_string())?.gid;
            s = s.with_group(&w.directory, gid).map_err(|e| e.to_string())?;
        }
        if relaxed {
            s = w.fs.smask_relax(&s).map_err(|e| e.to_string())?;
        }
        Ok(s)
    }

    fn apply(&mut self, action: &Action) -> Result<(), String> {
        match action {
            Action::Spawn { host, pid, user, group, cmdline } => {
                let h = self.host(host)?;
                let uid = self.uid(user)?;
                let dir = &self.world.directory;
                let egid = match group {
                    Some(g) => dir.group_by_name(g).map_err(|e| e.to_string())?.gid,
                    None => dir.user(uid).map_err(|e| e.to_string())?.upg,
                };
                self.world.hosts[h]
                    .spawn_process_with_pid(dir, Pid(*pid), uid, egid, cmdline)
                    .map_err(|e| e.to_string())?;
                self.push(Body::Spawn { host: host.clone(), pid: Pid(*pid), uid, egid });
            }
            Action::Bind { host, pid, proto, port, role, remote } => {
                let h = self.host(host)?;
                self.world.hosts[h]
                    .bind_socket(Pid(*pid), *proto, *port, *role, remote.clone())
                    .map_err(|e| e.to_string())?;
                self.push(Body::Bind { host: host.clone(), pid: Pid(*pid), proto: *proto, port: *port, role: *role });
            }
            Action::Newgrp { host, pid, group } => {
                let h = self.host(host)?;
                let dir = &self.world.directory;
                let gid = dir.group_by_name(group).map_err(|e| e.to_string())?.gid;
                self.world.hosts[h].set_primary_group(dir, Pid(*pid), gid).map_err(|e| e.to_string())?;
                let uid = self.world.hosts[h].process(Pid(*pid)).map_err(|e| e.to_string())?.uid;
                self.push(Body::Newgrp { host: host.clone(), pid: Pid(*pid), uid, egid: gid });
            }
            Action::Connect { host, pid, dst_host, dst_port, src_port, packets } => {
                let kinds = std::iter::once(PacketKind::NewSyn).chain((0..*packets).map(|_| PacketKind::Packet));
                self.send(Proto::Tcp, host, *pid, dst_host, *dst_port, *src_port, kinds.collect())?;
            }
            Action::SendUdp { host, pid, dst_host, dst_port, src_port, count } => {
                let kinds = vec![PacketKind::Packet; *count as usize];
                self.send(Proto::Udp, host, *pid, dst_host, *dst_port, *src_port, kinds)?;
            }
            Action::Create { user, parent, name, node, mode, umask, group, relaxed } => {
                let s = self.session(user, *umask, group.as_deref(), *relaxed)?;
                let w = &mut self.world;
                let n = w
                    .fs
                    .create_node(&w.directory, &s, parent, name, *node, *mode)
                    .map_err(|e| e.to_string())?;
                let body = Body::Create { uid: s.uid(), path: n.path.clone(), node: n.kind, group: n.group, mode: n.mode };
                self.push(body);
            }
            Action::Chmod { user, path, mode, relaxed } => {
                let s = self.session(user, crate::perm::Mode::new(0o022), None, *relaxed)?;
                self.world.fs.chmod(&s, path, *mode).map_err(|e| e.to_string())?;
                let mode = self.world.fs.node(path).map_err(|e| e.to_string())?.mode;
                self.push(Body::Chmod { uid: s.uid(), path: path.clone(), mode });
            }
            Action::Setacl { user, path, group, perms } => {
                let s = self.session(user, crate::perm::Mode::new(0o022), None, false)?;
                let w = &mut self.world;
                let gid = w.directory.group_by_name(group).map_err(|e| e.to_string())?.gid;
                w.fs.set_acl(&w.directory, &s, path, gid, *perms).map_err(|e| e.to_string())?;
                self.push(Body::Setacl { uid: s.uid(), path: path.clone(), gid, perms: *perms });
            }
            Action::Read { user, path } => {
                let uid = self.uid(user)?;
                let w = &self.world;
                let groups = w.directory.effective_groups(uid).map_err(|e| e.to_string())?;
                let granted = w.fs.access_checked(uid, &groups, path, Perms::R).map_err(|e| e.to_string())?;
                let n = w.fs.node(path).map_err(|e| e.to_string())?;
                let body = Body::Read {
                    uid,
                    path: path.clone(),
                    granted,
                    owner: n.owner,
                    group: n.group,
                    mode: n.mode,
                    acl: n.acl.clone(),
                };
                self.push(body);
            }
            Action::Ps { host, pid } => {
                let h = &self.world.hosts[self.host(host)?];
                let viewer = h.process(Pid(*pid)).map_err(|e| e.to_string())?;
                let mut groups = viewer.supplemental.clone();
                groups.insert(viewer.egid);
                let visible = h
                    .list_visible_processes(Pid(*pid))
                    .map_err(|e| e.to_string())?
                    .into_iter()
                    .map(|p| ProcView { pid: p, uid: h.process(p).expect("listed").uid })
                    .collect();
                let body = Body::Ps { host: host.clone(), pid: Pid(*pid), uid: viewer.uid, groups, visible };
                self.push(body);
            }
            Action::Squeue { user } => {
                let uid = self.uid(user)?;
                let c = &self.world.cluster;
                let visible = c
                    .visible_jobs(uid)
                    .into_iter()
                    .map(|j| JobView { job: j, uid: c.job(j).expect("listed").uid })
                    .collect();
                self.push(Body::Squeue { uid, visible });
            }
            Action::Ssh { user, node } => {
                let uid = self.uid(user)?;
                let h = self.host(node)?;
                let idx = *self.world.host_nodes.get(&h).ok_or_else(|| format!("{node:?} is not a compute node"))?;
                let allowed = self.world.cluster.can_ssh(uid, idx);
                let residents = self.world.cluster.node_users(idx);
                self.push(Body::Ssh { uid, node: node.clone(), allowed, residents });
            }
            Action::SubmitJob { id, user, cores, gpus, duration_s } => {
                self.submit(*id, user, *cores, *gpus, *duration_s)?;
                self.schedule();
            }
            Action::Tick => {}
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn send(
        &mut self,
        proto: Proto,
        host: &str,
        pid: u32,
        dst_host: &str,
        dst_port: u16,
        src_port: Option<u16>,
        kinds: Vec<PacketKind>,
    ) -> Result<(), String> {
        let (h, d) = (self.host(host)?, self.host(dst_host)?);
        let pid = Pid(pid);
        let from_uid = self.world.hosts[h].process(pid).map_err(|e| e.to_string())?.uid;
        let dst = Endpoint::new(self.world.hosts[d].address.clone(), dst_port);
        let src_host = &mut self.world.hosts[h];
        let port = match src_port {
            Some(p) => p,
            None => src_host.ephemeral_port(proto).map_err(|e| e.to_string())?,
        };
        let reuse = src_host
            .find_socket(proto, port, SocketRole::Outbound, Some(&dst))
            .is_some_and(|s| s.owner_pid == pid);
        if !reuse {
            src_host
                .bind_socket(pid, proto, port, SocketRole::Outbound, Some(dst.clone()))
                .map_err(|e| e.to_string())?;
        }
        let src = Endpoint::new(src_host.address.clone(), port);

        let f = &self.scenario.file;
        let ident: Vec<_> = f.hosts.iter().map(|hd| (hd.ident, hd.ident_latency_ms)).collect();
        for kind in kinds {
            let w = &self.world;
            let transport = SimTransport { hosts: &w.hosts, directory: &w.directory, ident: &ident };
            let ev = ConnectionEvent { proto, src: src.clone(), dst: dst.clone(), kind, at: self.now };
            let listener = w.hosts[d].lookup_socket_owner(&w.directory, proto, dst_port, SocketRole::Listener, None);
            let handled = self.tables[d]
                .handle_packet(&ev, |e| decide(e, &w.hosts[d], &transport, &w.directory, &f.engine));
            let host_id = w.hosts[d].id.clone();
            if let Some(v) = handled.decided {
                self.trace.push(TraceRecord {
                    t: self.now,
                    body: Body::Verdict {
                        verdict: v.decision(),
                        reason: v.reason(),
                        host: host_id.clone(),
                        proto,
                        src: src.clone(),
                        dst: dst.clone(),
                    },
                });
            }
            self.trace.push(TraceRecord {
                t: self.now,
                body: Body::Packet {
                    host: host_id,
                    proto,
                    src: src.clone(),
                    dst: dst.clone(),
                    kind,
                    action: handled.action,
                    from_uid,
                    to_uid: listener.as_ref().map(|l| l.uid),
                    listener_egid: listener.as_ref().map(|l| l.egid),
                },
            });
        }
        Ok(())
    }
}
