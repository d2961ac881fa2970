use coflow_switch::analysis::{
    dilation_report, read_csv, sweep, write_csv, ExperimentPlan, SweepGrid, STATUS_OK,
};
use coflow_switch::engine::{PolicyConfig, SimConfig};
use coflow_switch::traffic::CoflowModel;

fn base(n: usize, horizon: u64) -> SimConfig {
    SimConfig::new(
        CoflowModel::uniform_geometric(n, 0.3, 2.5),
        PolicyConfig::cab(None, false, false),
        horizon,
        1,
    )
}

#[test]
fn n_grid_two_policies_five_seeds_gives_forty_rows() {
    let plan = ExperimentPlan {
        base: base(16, 3000),
        grid: SweepGrid::N(vec![16, 32, 64, 128]),
        policies: vec![PolicyConfig::cab(None, true, true), PolicyConfig::randomized()],
        replications: 5,
        output: None,
    };
    let rows = sweep(&plan).unwrap();
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r.status == STATUS_OK));
    let mut k = 0;
    for n in [16, 32, 64, 128] {
        for policy in ["cab", "randomized"] {
            for seed in 1..=5 {
                assert_eq!((rows[k].n, rows[k].policy.as_str(), rows[k].seed), (n, policy, seed));
                k += 1;
            }
        }
    }

    // Same plan, same bytes.
    let mut a = Vec::new();
    write_csv(&rows, &mut a).unwrap();
    let mut b = Vec::new();
    write_csv(&sweep(&plan).unwrap(), &mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(read_csv(a.as_slice()).unwrap(), rows);

    let report = dilation_report(&rows).unwrap();
    assert_eq!(report.len(), 8);
    assert!(report.iter().all(|r| r.seeds == 5));
}

#[test]
fn cab_delay_increases_with_load() {
    let plan = ExperimentPlan {
        base: base(32, 200_000),
        grid: SweepGrid::Rho(vec![0.5, 0.75, 0.9]),
        policies: vec![],
        replications: 1,
        output: None,
    };
    let rows = sweep(&plan).unwrap();
    let delays: Vec<f64> = rows.iter().map(|r| r.mean_coflow_delay.unwrap()).collect();
    assert!(delays.windows(2).all(|w| w[0] < w[1]), "{delays:?}");
    let frames: Vec<u64> = rows.iter().map(|r| r.frame_size.unwrap()).collect();
    assert!(frames.windows(2).all(|w| w[0] < w[1]), "{frames:?}");
}
