//! Every (viewer, target) pair on hosts with up to five users, against the
//! three-clause visibility rule.

use ubfsim::directory::{Directory, GroupKind, UserId};
use ubfsim::host::{Host, Pid};

#[test]
fn visibility_matrix_is_exhaustive() {
    let mut checked = 0;
    // bit i: user i is in the exempt group
    for exempt_mask in 0u32..(1 << 5) {
        let mut dir = Directory::new();
        dir.create_user_with_uid("root", UserId::ROOT).unwrap();
        let users: Vec<UserId> = (0..5).map(|i| dir.create_user(&format!("u{i}")).unwrap().uid).collect();
        let seepid = dir.create_group("seepid", GroupKind::Exempt).unwrap().gid;
        for (i, &u) in users.iter().enumerate() {
            if exempt_mask & (1 << i) != 0 {
                dir.add_member(seepid, u).unwrap();
            }
        }
        for hidepid in [true, false] {
            for with_exempt in [true, false] {
                let mut host = Host::new("login1", "10.0.0.1");
                host.hidepid = hidepid;
                if with_exempt {
                    host.exempt_gid = Some(seepid);
                }
                let mut owners = vec![];
                let mut pid = 100;
                for &u in users.iter().chain([UserId::ROOT].iter()) {
                    // two processes each: primary group UPG, and (for exempt members) egid seepid
                    let upg = dir.user(u).unwrap().upg;
                    host.spawn_process_with_pid(&dir, Pid(pid), u, upg, "sh").unwrap();
                    owners.push((Pid(pid), u, false));
                    pid += 1;
                    if dir.is_member(u, seepid).unwrap() {
                        host.spawn_process_with_pid(&dir, Pid(pid), u, seepid, "sh").unwrap();
                        owners.push((Pid(pid), u, true));
                        pid += 1;
                    }
                }
                for &(viewer, vu, _) in &owners {
                    let visible = host.list_visible_processes(viewer).unwrap();
                    let in_exempt = with_exempt && dir.is_member(vu, seepid).unwrap();
                    for &(target, tu, _) in &owners {
                        let want = !hidepid || vu == tu || vu.is_root() || in_exempt;
                        assert_eq!(visible.contains(&target), want, "viewer {viewer} target {target}");
                        assert_eq!(host.visible_cmdline(viewer, target).unwrap().is_some(), want);
                        checked += 1;
                    }
                }
            }
        }
    }
    // per mask: 4 host configurations, (6 + exempt members)^2 process pairs
    let want: usize = (0u32..32).map(|m| 4 * (6 + m.count_ones() as usize).pow(2)).sum();
    assert_eq!(checked, want);
}
