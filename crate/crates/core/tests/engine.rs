use sabre_core::network::{BaseGraph, Schedule, Topology};
use sabre_core::scenario::MessagePolicy;
use sabre_core::{preset, run, ClientId, EngineOptions, RunRecord, Scenario};

fn csv(rec: &RunRecord) -> Vec<u8> {
    let mut buf = Vec::new();
    rec.write_csv(&mut buf).unwrap();
    buf
}

fn short(name: &str, t_max: u64) -> Scenario {
    let mut s = preset(name).unwrap();
    s.t_max = t_max;
    s
}

fn two_clients(support: [&[usize]; 2]) -> Scenario {
    let mut s = short("p2p5-benign", 200);
    s.task.clients.truncate(2);
    for (c, sup) in s.task.clients.iter_mut().zip(support) {
        c.support = sup.to_vec();
    }
    s.topology = Topology::complete(2);
    s
}

#[test]
fn worker_count_does_not_change_records() {
    for (name, t) in [("p2p5-node4-labelflip", 500), ("n50-alie-10", 40), ("graph-timevarying", 30), ("n50-benign", 20)] {
        let s = short(name, t);
        let one = run(&s, EngineOptions { workers: 1 }).unwrap();
        let four = run(&s, EngineOptions { workers: 4 }).unwrap();
        assert!(one.is_ordered(), "{name}");
        assert_eq!(csv(&one), csv(&four), "{name}");
    }
}

#[test]
fn seed_changes_the_data() {
    let a = run(&short("p2p5-benign", 20), EngineOptions::default()).unwrap();
    let mut s = short("p2p5-benign", 20);
    s.seed += 1;
    let b = run(&s, EngineOptions::default()).unwrap();
    assert_ne!(csv(&a), csv(&b));
}

#[test]
fn isolated_client_social_equals_local() {
    let mut s = short("p2p5-benign", 300);
    s.topology = Topology {
        nodes: 5,
        base: BaseGraph::Edges { edges: vec![] },
        schedule: Schedule::Static,
    };
    let rec = run(&s, EngineOptions::default()).unwrap();
    for r in &rec.rows {
        assert_eq!(r.neighbors, vec![r.client]);
        for (a, b) in r.social_mean.iter().zip(&r.local_mean) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "client {} cycle {}", r.client, r.cycle);
        }
        for (a, b) in r.social_var.iter().zip(&r.local_var) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn local_beliefs_ignore_the_network() {
    let connected = run(&short("p2p5-node4-labelflip", 300), EngineOptions::default()).unwrap();
    let mut s = short("p2p5-node4-labelflip", 300);
    s.topology = Topology {
        nodes: 5,
        base: BaseGraph::Edges { edges: vec![] },
        schedule: Schedule::Static,
    };
    let isolated = run(&s, EngineOptions::default()).unwrap();
    assert_eq!(connected.rows.len(), isolated.rows.len());
    for (a, b) in connected.rows.iter().zip(&isolated.rows) {
        assert_eq!(a.local_mean, b.local_mean);
        assert_eq!(a.local_var, b.local_var);
    }
}

#[test]
fn clients_trusting_each_other_agree() {
    let s = two_clients([&[0, 1], &[0, 1]]);
    let rec = run(&s, EngineOptions::default()).unwrap();
    let mut mutual = 0;
    for t in 1..=s.t_max {
        let rows: Vec<_> = rec.rows.iter().filter(|r| r.cycle == t).collect();
        let both = [ClientId(1), ClientId(2)];
        if rows.iter().all(|r| r.confidence_set == both && r.overwritten.is_empty()) {
            mutual += 1;
            assert_eq!(rows[0].social_mean, rows[1].social_mean, "cycle {t}");
            assert_eq!(rows[0].social_var, rows[1].social_var, "cycle {t}");
        }
    }
    assert!(mutual > 10);
}

#[test]
fn stale_messages_expire_only_under_the_expiry_policy() {
    let mut s = two_clients([&[0], &[0]]);
    s.t_max = 30;
    s.cycle_lengths = Some(vec![3, 1]);
    let persist = run(&s, EngineOptions::default()).unwrap();
    s.message_policy = MessagePolicy::ExpireAfterTick;
    let expire = run(&s, EngineOptions::default()).unwrap();

    // client 2 sends its last message at joint tick 9
    let last2 = persist.last_row(ClientId(2)).unwrap();
    assert_eq!((last2.cycle, last2.tick), (30, 9));
    let slow = |rec: &RunRecord| -> Vec<(u64, usize)> {
        rec.rows_for(ClientId(1)).map(|r| (r.tick, r.neighbors.len())).collect()
    };
    for (tick, n) in slow(&persist) {
        assert_eq!(n, 2, "persist, tick {tick}");
    }
    for (tick, n) in slow(&expire) {
        assert_eq!(n, if tick <= 10 { 2 } else { 1 }, "expire, tick {tick}");
    }
    assert_eq!(persist.last_row(ClientId(1)).unwrap().tick, 29);
}

#[test]
fn every_client_stops_at_t_max() {
    let s = short("p2p5-majority-compromised", 123);
    let rec = run(&s, EngineOptions::default()).unwrap();
    for c in rec.clients() {
        let rows: Vec<_> = rec.rows_for(c).collect();
        assert_eq!(rows.len(), 123);
        assert!(rows.iter().enumerate().all(|(i, r)| r.cycle == i as u64 + 1));
        assert!(rows.last().unwrap().terminated);
        assert!(rows[..122].iter().all(|r| !r.terminated));
    }
}

#[test]
fn covariance_threshold_terminates_early() {
    let mut s = short("p2p5-benign", 2000);
    s.sigma_threshold = 1e-3;
    let rec = run(&s, EngineOptions::default()).unwrap();
    for c in rec.clients() {
        let last = rec.last_row(c).unwrap();
        assert!(last.terminated);
        assert!(last.cycle < 2000);
        assert!(last.social_trace <= 1e-3);
        assert!(rec.rows_for(c).filter(|r| r.social_trace <= 1e-3).count() == 1);
    }
}

#[test]
fn diagonal_mode_keeps_social_covariance_diagonal() {
    let mut s = short("p2p5-node4-labelflip", 50);
    s.covariance_mode = sabre_core::CovarianceMode::Diagonal;
    let mut sim = sabre_core::Simulation::new(&s, EngineOptions::default()).unwrap();
    while !sim.is_done() {
        sim.step_unit().unwrap();
        for c in sim.clients() {
            let cov = c.social.covariance();
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        assert_eq!(cov[(i, j)], 0.0);
                    }
                }
            }
        }
    }
}
