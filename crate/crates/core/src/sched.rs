//! Batch scheduler with whole-node-per-user placement and GPU hand-off hygiene.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directory::{Directory, DirectoryError, GroupId, UserId};
use crate::ubf::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Queued,
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSpec {
    pub id: JobId,
    pub uid: UserId,
    pub cores: u32,
    pub gpus: u32,
    pub duration_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub id: JobId,
    pub uid: UserId,
    pub upg: GroupId,
    pub cores_requested: u32,
    pub gpus_requested: u32,
    pub duration_ms: Millis,
    pub state: JobState,
    pub placement: Vec<(usize, u32)>,
    pub gpu_devices: Vec<(usize, u32)>,
    pub started_at: Option<Millis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GpuDevice {
    pub dev_id: u32,
    pub assigned_group: Option<GroupId>,
    pub memory_dirty_by: Option<UserId>,
}

impl GpuDevice {
    pub fn new(dev_id: u32) -> Self {
        Self { dev_id, assigned_group: None, memory_dirty_by: None }
    }

    pub fn is_clean_and_free(&self) -> bool {
        self.assigned_group.is_none() && self.memory_dirty_by.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: String,
    pub cores_total: u32,
    pub cores_allocated: u32,
    pub gpus: Vec<GpuDevice>,
    pub running: BTreeSet<JobId>,
}

impl Node {
    pub fn new(id: impl Into<String>, cores: u32, gpus: u32) -> Self {
        Self {
            id: id.into(),
            cores_total: cores,
            cores_allocated: 0,
            gpus: (0..gpus).map(GpuDevice::new).collect(),
            running: BTreeSet::new(),
        }
    }

    pub fn free_cores(&self) -> u32 {
        self.cores_total - self.cores_allocated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedPolicy {
    /// Only one user's jobs may run on a node at a time.
    pub whole_node: bool,
    /// Clear GPU memory and revoke device access when a job ends.
    pub gpu_epilog: bool,
}

impl Default for SchedPolicy {
    fn default() -> Self {
        Self { whole_node: true, gpu_epilog: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub job: JobId,
    pub node: usize,
    pub cores: u32,
}

/// State changes, in the order they happened, for tracing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchedEvent {
    Submitted { job: JobId, uid: UserId },
    /// `co_resident` lists the other users with jobs on the node at placement.
    Placed { job: JobId, uid: UserId, node: usize, cores: u32, co_resident: BTreeSet<UserId> },
    GpuAssigned { node: usize, dev: u32, uid: UserId, group: GroupId, dirty_from: Option<UserId> },
    Completed { job: JobId, uid: UserId, node: usize },
    GpuDirtied { node: usize, dev: u32, uid: UserId },
    GpuCleared { node: usize, dev: u32 },
    /// Access revoked without clearing memory (epilog disabled).
    GpuReleased { node: usize, dev: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedError {
    #[error(transparent)]
    Directory(#[from] DirectoryError),
    #[error("job {0} already exists")]
    DuplicateJob(JobId),
    #[error("no job {0}")]
    UnknownJob(JobId),
    #[error("no node {0:?}")]
    UnknownNode(String),
    #[error("job {0} is not running")]
    NotRunning(JobId),
    #[error("job {0} is not running on node {1}")]
    NotOnNode(JobId, String),
    #[error("job {0} requests zero cores")]
    ZeroCores(JobId),
    #[error("job {0} does not fit on any node")]
    Unsatisfiable(JobId),
    #[error("no clean unassigned GPU on node {0}")]
    NoFreeGpu(String),
    #[error("node {0:?} already exists")]
    DuplicateNode(String),
}

#[derive(Debug, Clone)]
pub struct Cluster {
    nodes: Vec<Node>,
    jobs: BTreeMap<JobId, Job>,
    queue: VecDeque<JobId>,
    policy: SchedPolicy,
    events: Vec<SchedEvent>,
}

impl Cluster {
    pub fn new(policy: SchedPolicy) -> Self {
        Self { nodes: vec![], jobs: BTreeMap::new(), queue: VecDeque::new(), policy, events: vec![] }
    }

    pub fn add_node(&mut self, node: Node) -> Result<usize, SchedError> {
        if self.nodes.iter().any(|n| n.id == node.id) {
            return Err(SchedError::DuplicateNode(node.id));
        }
        self.nodes.push(node);
        Ok(self.nodes.len() - 1)
    }

    pub fn policy(&self) -> SchedPolicy {
        self.policy
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_index(&self, id: &str) -> Result<usize, SchedError> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or_else(|| SchedError::UnknownNode(id.to_owned()))
    }

    pub fn job(&self, id: JobId) -> Result<&Job, SchedError> {
        self.jobs.get(&id).ok_or(SchedError::UnknownJob(id))
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.jobs.values()
    }

    pub fn queued(&self) -> impl Iterator<Item = JobId> + '_ {
        self.queue.iter().copied()
    }

    pub fn drain_events(&mut self) -> Vec<SchedEvent> {
        std::mem::take(&mut self.events)
    }

    /// Users with running jobs on node `idx`.
    pub fn node_users(&self, idx: usize) -> BTreeSet<UserId> {
        self.nodes[idx].running.iter().map(|j| self.jobs[j].uid).collect()
    }

    pub fn submit(&mut self, dir: &Directory, spec: JobSpec) -> Result<(), SchedError> {
        if self.jobs.contains_key(&spec.id) {
            return Err(SchedError::DuplicateJob(spec.id));
        }
        if spec.cores == 0 {
            return Err(SchedError::ZeroCores(spec.id));
        }
        let fits_somewhere = self
            .nodes
            .iter()
            .any(|n| n.cores_total >= spec.cores && n.gpus.len() as u32 >= spec.gpus);
        if !fits_somewhere {
            return Err(SchedError::Unsatisfiable(spec.id));
        }
        let upg = dir.user(spec.uid)?.upg;
        self.jobs.insert(
            spec.id,
            Job {
                id: spec.id,
                uid: spec.uid,
                upg,
                cores_requested: spec.cores,
                gpus_requested: spec.gpus,
                duration_ms: spec.duration_ms,
                state: JobState::Queued,
                placement: vec![],
                gpu_devices: vec![],
                started_at: None,
            },
        );
        self.queue.push_back(spec.id);
        self.events.push(SchedEvent::Submitted { job: spec.id, uid: spec.uid });
        Ok(())
    }

    /// Devices the allocator considers available. Without the epilog nothing
    /// tracks leftover memory, so only the assignment is checked.
    fn allocatable_gpus(&self, node: &Node) -> usize {
        node.gpus
            .iter()
            .filter(|g| {
                if self.policy.gpu_epilog {
                    g.is_clean_and_free()
                } else {
                    g.assigned_group.is_none()
                }
            })
            .count()
    }

    fn choose_node(&self, job: &Job) -> Option<usize> {
        let fits = |n: &Node| {
            n.free_cores() >= job.cores_requested
                && self.allocatable_gpus(n) >= job.gpus_requested as usize
        };
        let mut same_user = None::<(u32, usize)>;
        let mut empty = None::<(u32, usize)>;
        let mut other = None::<(u32, usize)>;
        for (i, n) in self.nodes.iter().enumerate() {
            if !fits(n) {
                continue;
            }
            let users = self.node_users(i);
            let slot = if users.is_empty() {
                &mut empty
            } else if users.len() == 1 && users.contains(&job.uid) {
                &mut same_user
            } else if self.policy.whole_node {
                continue;
            } else {
                &mut other
            };
            // best fit: least free cores left over, lowest index on ties
            let left = n.free_cores() - job.cores_requested;
            if slot.is_none_or(|(best, _)| left < best) {
                *slot = Some((left, i));
            }
        }
        same_user.or(other).or(empty).map(|(_, i)| i)
    }

    /// Places queued jobs in submission order, stopping at the first job that
    /// cannot be placed.
    pub fn schedule_step(&mut self, now: Millis) -> Vec<Placement> {
        let mut placed = vec![];
        while let Some(&id) = self.queue.front() {
            let Some(node) = self.choose_node(&self.jobs[&id]) else { break };
            self.queue.pop_front();
            let job = &self.jobs[&id];
            let (uid, cores, gpus) = (job.uid, job.cores_requested, job.gpus_requested);
            // other users already running here; empty under whole-node allocation
            let mut co_resident = self.node_users(node);
            co_resident.remove(&uid);
            let job = self.jobs.get_mut(&id).unwrap();
            job.state = JobState::Running;
            job.placement = vec![(node, cores)];
            job.started_at = Some(now);
            let n = &mut self.nodes[node];
            n.cores_allocated += cores;
            n.running.insert(id);
            self.events.push(SchedEvent::Placed { job: id, uid, node, cores, co_resident });
            for _ in 0..gpus {
                let dev = if self.policy.gpu_epilog {
                    self.assign_gpu(node, id)
                } else {
                    self.assign_gpu_unchecked(node, id)
                };
                // choose_node guaranteed enough devices
                dev.expect("allocatable device");
            }
            placed.push(Placement { job: id, node, cores });
        }
        placed
    }

    /// Grants the job's private group access to a clean, unassigned device on `node`.
    pub fn assign_gpu(&mut self, node: usize, job: JobId) -> Result<u32, SchedError> {
        self.assign_with(node, job, GpuDevice::is_clean_and_free)
    }

    fn assign_gpu_unchecked(&mut self, node: usize, job: JobId) -> Result<u32, SchedError> {
        self.assign_with(node, job, |g| g.assigned_group.is_none())
    }

    fn assign_with(
        &mut self,
        node: usize,
        job_id: JobId,
        usable: impl Fn(&GpuDevice) -> bool,
    ) -> Result<u32, SchedError> {
        let job = self.jobs.get(&job_id).ok_or(SchedError::UnknownJob(job_id))?;
        let n = self.nodes.get_mut(node).ok_or_else(|| SchedError::UnknownNode(node.to_string()))?;
        if job.state != JobState::Running || !n.running.contains(&job_id) {
            return Err(SchedError::NotOnNode(job_id, n.id.clone()));
        }
        let dev = n
            .gpus
            .iter_mut()
            .find(|g| usable(g))
            .ok_or_else(|| SchedError::NoFreeGpu(n.id.clone()))?;
        dev.assigned_group = Some(job.upg);
        let (uid, group, dirty_from, dev_id) = (job.uid, job.upg, dev.memory_dirty_by, dev.dev_id);
        self.jobs.get_mut(&job_id).unwrap().gpu_devices.push((node, dev_id));
        self.events.push(SchedEvent::GpuAssigned { node, dev: dev_id, uid, group, dirty_from });
        Ok(dev_id)
    }

    /// Ends a running job, frees its cores and runs the GPU epilog (if enabled).
    pub fn complete_job(&mut self, id: JobId, _now: Millis) -> Result<(), SchedError> {
        let job = self.jobs.get_mut(&id).ok_or(SchedError::UnknownJob(id))?;
        if job.state != JobState::Running {
            return Err(SchedError::NotRunning(id));
        }
        job.state = JobState::Done;
        let uid = job.uid;
        let placement = job.placement.clone();
        let devices = job.gpu_devices.clone();
        for &(node, cores) in &placement {
            let n = &mut self.nodes[node];
            n.cores_allocated -= cores;
            n.running.remove(&id);
            self.events.push(SchedEvent::Completed { job: id, uid, node });
        }
        for (node, dev_id) in devices {
            let dev = self.nodes[node].gpus.iter_mut().find(|g| g.dev_id == dev_id).unwrap();
            dev.memory_dirty_by = Some(uid);
            self.events.push(SchedEvent::GpuDirtied { node, dev: dev_id, uid });
            dev.assigned_group = None;
            if self.policy.gpu_epilog {
                dev.memory_dirty_by = None;
                self.events.push(SchedEvent::GpuCleared { node, dev: dev_id });
            } else {
                self.events.push(SchedEvent::GpuReleased { node, dev: dev_id });
            }
        }
        Ok(())
    }

    /// pam_slurm-style gate: only users with a running job on the node may log in.
    pub fn can_ssh(&self, uid: UserId, node: usize) -> bool {
        uid.is_root()
            || self.nodes.get(node).is_some_and(|n| n.running.iter().any(|j| self.jobs[j].uid == uid))
    }

    /// PrivateData-style listing: own jobs only, root sees everything.
    pub fn visible_jobs(&self, viewer: UserId) -> BTreeSet<JobId> {
        self.jobs
            .values()
            .filter(|j| viewer.is_root() || j.uid == viewer)
            .map(|j| j.id)
            .collect()
    }
}

/// Device nodes are visible only to the assigned user's private group (and root).
pub fn gpu_visible(dir: &Directory, viewer: UserId, device: &GpuDevice) -> bool {
    if viewer.is_root() {
        return true;
    }
    match (device.assigned_group, dir.user(viewer)) {
        (Some(g), Ok(u)) => g == u.upg,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir() -> (Directory, UserId, UserId) {
        let mut d = Directory::new();
        let a = d.create_user("alice").unwrap().uid;
        let b = d.create_user("bob").unwrap().uid;
        (d, a, b)
    }

    fn spec(id: u64, uid: UserId, cores: u32, gpus: u32) -> JobSpec {
        JobSpec { id: JobId(id), uid, cores, gpus, duration_ms: 1000 }
    }

    #[test]
    fn same_user_packs_other_user_waits() {
        let (d, alice, bob) = dir();
        let mut c = Cluster::new(SchedPolicy::default());
        c.add_node(Node::new("node1", 16, 0)).unwrap();
        c.submit(&d, spec(1, alice, 4, 0)).unwrap();
        assert_eq!(c.schedule_step(0), vec![Placement { job: JobId(1), node: 0, cores: 4 }]);
        c.submit(&d, spec(2, alice, 4, 0)).unwrap();
        assert_eq!(c.schedule_step(1), vec![Placement { job: JobId(2), node: 0, cores: 4 }]);
        assert_eq!(c.nodes()[0].free_cores(), 8);
        c.submit(&d, spec(3, bob, 1, 0)).unwrap();
        assert!(c.schedule_step(2).is_empty());
        assert_eq!(c.job(JobId(3)).unwrap().state, JobState::Queued);
        c.complete_job(JobId(1), 3).unwrap();
        assert!(c.schedule_step(3).is_empty());
        c.complete_job(JobId(2), 4).unwrap();
        assert_eq!(c.schedule_step(4).len(), 1);
        assert_eq!(c.node_users(0), BTreeSet::from([bob]));
    }

    #[test]
    fn prefers_partial_same_user_node_then_best_fit_empty() {
        let (d, alice, _) = dir();
        let mut c = Cluster::new(SchedPolicy::default());
        c.add_node(Node::new("big", 32, 0)).unwrap();
        c.add_node(Node::new("small", 8, 0)).unwrap();
        c.submit(&d, spec(1, alice, 4, 0)).unwrap();
        // best fit among empty nodes: small leaves 4 free, big leaves 28
        assert_eq!(c.schedule_step(0)[0].node, 1);
        c.submit(&d, spec(2, alice, 4, 0)).unwrap();
        assert_eq!(c.schedule_step(0)[0].node, 1);
        c.submit(&d, spec(3, alice, 4, 0)).unwrap();
        assert_eq!(c.schedule_step(0)[0].node, 0);
    }

    #[test]
    fn strict_fifo_blocks_later_jobs() {
        let (d, alice, bob) = dir();
        let mut c = Cluster::new(SchedPolicy::default());
        c.add_node(Node::new("n1", 8, 0)).unwrap();
        c.add_node(Node::new("n2", 8, 0)).unwrap();
        c.submit(&d, spec(1, alice, 8, 0)).unwrap();
        c.submit(&d, spec(2, alice, 8, 0)).unwrap();
        c.submit(&d, spec(3, bob, 8, 0)).unwrap();
        c.submit(&d, spec(4, alice, 1, 0)).unwrap();
        assert_eq!(c.schedule_step(0).len(), 2);
        assert_eq!(c.queued().collect::<Vec<_>>(), vec![JobId(3), JobId(4)]);
    }

    #[test]
    fn submit_validation() {
        let (d, alice, _) = dir();
        let mut c = Cluster::new(SchedPolicy::default());
        c.add_node(Node::new("n1", 8, 1)).unwrap();
        assert_eq!(c.submit(&d, spec(1, alice, 0, 0)), Err(SchedError::ZeroCores(JobId(1))));
        assert_eq!(c.submit(&d, spec(1, alice, 9, 0)), Err(SchedError::Unsatisfiable(JobId(1))));
        assert_eq!(c.submit(&d, spec(1, alice, 1, 2)), Err(SchedError::Unsatisfiable(JobId(1))));
        c.submit(&d, spec(1, alice, 1, 1)).unwrap();
        assert_eq!(c.submit(&d, spec(1, alice, 1, 0)), Err(SchedError::DuplicateJob(JobId(1))));
        assert!(c.submit(&d, spec(2, UserId(5), 1, 0)).is_err());
        assert_eq!(c.add_node(Node::new("n1", 1, 0)), Err(SchedError::DuplicateNode("n1".into())));
    }

    #[test]
    fn gpu_lifecycle_with_epilog() {
        let (d, alice, bob) = dir();
        let mut c = Cluster::new(SchedPolicy::default());
        c.add_node(Node::new("g1", 8, 1)).unwrap();
        c.submit(&d, spec(1, alice, 1, 1)).unwrap();
        c.schedule_step(0);
        let dev = c.nodes()[0].gpus[0];
        assert_eq!(dev.assigned_group, Some(GroupId(alice.0)));
        assert!(gpu_visible(&d, alice, &dev));
        assert!(!gpu_visible(&d, bob, &dev));
        assert!(gpu_visible(&d, UserId::ROOT, &dev));
        assert_eq!(c.assign_gpu(0, JobId(1)), Err(SchedError::NoFreeGpu("g1".into())));
        c.complete_job(JobId(1), 10).unwrap();
        let dev = c.nodes()[0].gpus[0];
        assert_eq!((dev.assigned_group, dev.memory_dirty_by), (None, None));
        assert!(!gpu_visible(&d, alice, &dev));
        c.submit(&d, spec(2, bob, 1, 1)).unwrap();
        c.schedule_step(11);
        let assigned: Vec<_> = c
            .drain_events()
            .into_iter()
            .filter_map(|e| match e {
                SchedEvent::GpuAssigned { uid, dirty_from, .. } => Some((uid, dirty_from)),
                _ => None,
            })
            .collect();
        assert_eq!(assigned, vec![(alice, None), (bob, None)]);
        assert_eq!(c.complete_job(JobId(1), 12), Err(SchedError::NotRunning(JobId(1))));
    }

    #[test]
    fn dirty_device_not_assignable() {
        let (d, alice, bob) = dir();
        let mut c = Cluster::new(SchedPolicy::default());
        c.add_node(Node::new("g1", 8, 1)).unwrap();
        c.submit(&d, spec(1, bob, 1, 0)).unwrap();
        c.schedule_step(0);
        c.nodes[0].gpus[0].memory_dirty_by = Some(alice);
        assert_eq!(c.assign_gpu(0, JobId(1)), Err(SchedError::NoFreeGpu("g1".into())));
        c.nodes[0].gpus[0].memory_dirty_by = None;
        assert_eq!(c.assign_gpu(0, JobId(1)), Ok(0));
    }

    #[test]
    fn epilog_off_leaks_residue() {
        let (d, alice, bob) = dir();
        let mut c = Cluster::new(SchedPolicy { whole_node: true, gpu_epilog: false });
        c.add_node(Node::new("g1", 8, 1)).unwrap();
        c.submit(&d, spec(1, alice, 1, 1)).unwrap();
        c.schedule_step(0);
        c.complete_job(JobId(1), 5).unwrap();
        assert_eq!(c.nodes()[0].gpus[0].memory_dirty_by, Some(alice));
        c.submit(&d, spec(2, bob, 1, 1)).unwrap();
        c.schedule_step(6);
        assert!(c.drain_events().contains(&SchedEvent::GpuAssigned {
            node: 0,
            dev: 0,
            uid: bob,
            group: GroupId(bob.0),
            dirty_from: Some(alice)
        }));
    }

    #[test]
    fn ssh_and_listing() {
        let (d, alice, bob) = dir();
        let mut c = Cluster::new(SchedPolicy::default());
        c.add_node(Node::new("n1", 8, 0)).unwrap();
        assert!(c.visible_jobs(alice).is_empty());
        c.submit(&d, spec(1, alice, 1, 0)).unwrap();
        c.submit(&d, spec(2, bob, 1, 0)).unwrap();
        c.schedule_step(0);
        assert!(c.can_ssh(alice, 0));
        assert!(!c.can_ssh(bob, 0));
        assert!(c.can_ssh(UserId::ROOT, 0));
        assert_eq!(c.visible_jobs(alice), BTreeSet::from([JobId(1)]));
        assert_eq!(c.visible_jobs(UserId::ROOT), BTreeSet::from([JobId(1), JobId(2)]));
        c.complete_job(JobId(1), 1).unwrap();
        assert!(!c.can_ssh(alice, 0));
        assert_eq!(c.nodes()[0].free_cores(), 8);
    }

    #[test]
    fn whole_node_off_mixes_users() {
        let (d, alice, bob) = dir();
        let mut c = Cluster::new(SchedPolicy { whole_node: false, gpu_epilog: true });
        c.add_node(Node::new("n1", 8, 0)).unwrap();
        c.submit(&d, spec(1, alice, 1, 0)).unwrap();
        c.submit(&d, spec(2, bob, 1, 0)).unwrap();
        assert_eq!(c.schedule_step(0).len(), 2);
        assert_eq!(c.node_users(0), BTreeSet::from([alice, bob]));
    }
}
