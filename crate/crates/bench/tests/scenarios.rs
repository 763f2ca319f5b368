use std::io::Write;
use std::process::Command;

use stokes_bench::presets::NamedPreset;
use stokes_bench::report::{write_reports, write_summaries, COLUMNS, SUMMARY_COLUMNS};
use stokes_bench::scenario::{Snapshot, SnapshotPlan};
use stokes_bench::*;
use stokes_els::geometry::{PanelSelection, RefinementDirective};

fn named(preset: NamedPreset, n_panels: usize) -> GeometrySpec {
    GeometrySpec::Named {
        preset,
        n_panels: Some(n_panels),
    }
}

fn refine_ids(ids: &[usize], m: usize) -> Action {
    Action::Refine(RefinementDirective {
        selection: PanelSelection::PanelIds(ids.to_vec()),
        m,
    })
}

fn scenario_file(json: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(json.as_bytes()).unwrap();
    f
}

#[test]
fn parses_single_and_list_files() {
    let one = scenario_file(r#"{"name": "c", "geometry": {"preset": "circle"}, "strategy": "Direct-HBS"}"#);
    let list = Scenario::load(one.path()).unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0].strategy, Strategy::DirectHbs);
    assert_eq!(list[0].tolerances.compress, 1e-10);

    let many = scenario_file(
        r#"[
            {"name": "a", "geometry": {"preset": "fish", "n_panels": 40}, "strategy": "GMRES-HBS"},
            {"name": "b", "geometry": [{"kind": "star", "params": {"n_prongs": 5, "amplitude": 0.3}, "n_panels": 20}],
             "action": {"refine": {"panel_ids": [1, 2], "m": 4}}, "strategy": "Direct-Local",
             "tolerances": {"compress": 1e-8, "update_mode": "svd_optimal"}}
        ]"#,
    );
    let list = Scenario::load(many.path()).unwrap();
    assert_eq!(list.len(), 2);
    assert!(matches!(list[1].action, Action::Refine(_)));
    assert_eq!(list[1].tolerances.compress, 1e-8);
}

#[test]
fn local_strategy_without_action_rejected() {
    let s = Scenario::new("bad", named(NamedPreset::Circle, 10), Strategy::DirectLocal);
    assert!(matches!(s.validate(), Err(BenchError::Scenario(_))));
    assert!(matches!(run_scenario(&s), Err(BenchError::Scenario(_))));
}

#[test]
fn out_of_range_tolerances_rejected() {
    let mut s = Scenario::new("bad", named(NamedPreset::Circle, 10), Strategy::DirectHbs);
    s.tolerances.gmres = 0.0;
    assert!(s.validate().is_err());
    s.tolerances.gmres = 1e-11;
    s.tolerances.precond = Some(2.0);
    assert!(s.validate().is_err());
}

#[test]
fn circle_direct_hbs_is_accurate() {
    let s = Scenario::new("circle", named(NamedPreset::Circle, 10), Strategy::DirectHbs);
    let r = run_scenario(&s).unwrap();
    assert!(r.e <= 1e-8, "E = {:e}", r.e);
    assert!(r.t_comp.unwrap() >= 0.0 && r.t_inv.unwrap() >= 0.0 && r.t_dsol.unwrap() >= 0.0);
    assert_eq!((r.n_c, r.n_p), (0, 0));
}

#[test]
fn every_strategy_runs_on_a_refined_star() {
    let geom = named(NamedPreset::Fish, 40);
    for strategy in [
        Strategy::DirectHbs,
        Strategy::GmresHbs,
        Strategy::DirectLocal,
        Strategy::GmresLocal,
        Strategy::PgmresLocal,
        Strategy::GmresIndy,
        Strategy::DirectIndy,
    ] {
        let mut s = Scenario::new(strategy.name(), geom.clone(), strategy);
        s.action = refine_ids(&[8, 9], 4);
        let r = run_scenario(&s).unwrap();
        assert!(r.e <= 1e-8, "{}: E = {:e}", strategy.name(), r.e);
        assert_eq!((r.n_c, r.n_p), (32, 128));
        if strategy.is_local() {
            assert!(r.k.unwrap() > 0 && r.t_static.is_some());
        }
    }
}

#[test]
fn added_holes_scenario_runs() {
    let json = r#"{"name": "holes", "geometry": {"preset": "circle", "n_panels": 12}, "strategy": "Direct-Local",
        "action": {"add_holes": [{"curve": {"kind": "circle", "center": [0.3, 0.2], "scale": 0.15}, "n_panels": 8}]},
        "rhs": {"rings": [{"center": [0.0, 0.0], "radius": 3.0}]}}"#;
    let f = scenario_file(json);
    let s = &Scenario::load(f.path()).unwrap()[0];
    let r = run_scenario(s).unwrap();
    assert_eq!((r.n_c, r.n_p), (0, 128));
    assert!(r.e <= 1e-8, "E = {:e}", r.e);
}

#[test]
fn csv_schema_is_stable() {
    assert_eq!(
        &COLUMNS[..13],
        &["scenario", "strategy", "N_k", "N_c", "N_p", "k", "T_comp", "T_inv", "T_Dsol", "T_Gsol", "T_PGsol", "n_iter", "E"]
    );
    let mut s = Scenario::new("csv", named(NamedPreset::Circle, 10), Strategy::DirectLocal);
    s.action = refine_ids(&[2], 4);
    let r = run_scenario(&s).unwrap();
    let mut buf = Vec::new();
    write_reports(&mut buf, &[r.clone(), r]).unwrap();
    let mut rd = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), COLUMNS.to_vec());
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.len() == COLUMNS.len()));
    assert_eq!(&rows[0][1], "Direct-Local");
    assert!(rows[0][12].parse::<f64>().unwrap() >= 0.0);
}

fn snapshot_scenario(bodies: &[[f64; 2]], strategy: Strategy) -> Scenario {
    let mut s = Scenario::new("snap", named(NamedPreset::Circle, 20), strategy);
    s.action = Action::Snapshots(SnapshotPlan {
        m: 4,
        distance_factor: 2.0,
        list: bodies.iter().map(|&b| Snapshot { body: b, refine: None }).collect(),
    });
    s
}

#[test]
fn batch_without_refinement_reuses_static_solver() {
    let s = snapshot_scenario(&[[0.0, 0.0], [0.1, 0.2], [-0.2, 0.1]], Strategy::DirectLocal);
    let b = run_snapshot_batch(&s).unwrap();
    assert_eq!(b.reports.len(), 3);
    assert!(b.reports.iter().all(|r| r.t_rsol.is_none() && r.t_osol.is_some()));
    assert_eq!((b.summary.n_osol, b.summary.n_rsol), (3, 0));
    assert!(b.summary.t_rsol.is_none());
    assert!(b.reports.iter().all(|r| r.t_static == Some(b.summary.t_static)));
}

#[test]
fn twelve_refined_seven_unrefined_batch() {
    let mut bodies = Vec::new();
    for i in 0..12 {
        let t = 2.0 * std::f64::consts::PI * i as f64 / 12.0;
        bodies.push([0.93 * t.cos(), 0.93 * t.sin()]);
    }
    for i in 0..7 {
        let t = 2.0 * std::f64::consts::PI * i as f64 / 7.0;
        bodies.push([0.2 * t.cos(), 0.2 * t.sin()]);
    }
    let s = snapshot_scenario(&bodies, Strategy::DirectLocal);
    let b = run_snapshot_batch(&s).unwrap();
    assert_eq!((b.summary.n_rsol, b.summary.n_osol), (12, 7));
    assert!(b.summary.max_e <= 1e-8, "max E {:e}", b.summary.max_e);
    let mut buf = Vec::new();
    write_summaries(&mut buf, &[b.summary]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), SUMMARY_COLUMNS.join(","));
}

#[test]
fn repeated_plan_hits_the_cache() {
    let mut s = snapshot_scenario(&[[1.3, 0.0], [1.3, 0.0]], Strategy::DirectLocal);
    s.geometry = named(NamedPreset::Fish, 120);
    let b = run_snapshot_batch(&s).unwrap();
    let (first, second) = (b.reports[0].t_rsol.unwrap(), b.reports[1].t_rsol.unwrap());
    assert_eq!(b.reports[0].k, b.reports[1].k);
    assert!(second * 5.0 <= first, "first {first:.3} s, second {second:.3} s");
}

#[test]
fn non_timing_fields_are_deterministic() {
    let mut s = Scenario::new("det", named(NamedPreset::Fish, 40), Strategy::PgmresLocal);
    s.action = refine_ids(&[3, 4, 5], 4);
    s.seed = 7;
    let a = run_scenario(&s).unwrap();
    let b = run_scenario(&s).unwrap();
    assert_eq!((a.k, a.k_kc, a.k_kp, a.k_pk), (b.k, b.k_kc, b.k_kp, b.k_pk));
    assert_eq!(a.n_iter, b.n_iter);
    assert_eq!(a.e.to_bits(), b.e.to_bits());
}

fn bench(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bench")).args(args).env("RUST_LOG", "error").output().unwrap()
}

#[test]
fn cli_writes_report_and_exits_cleanly() {
    let f = scenario_file(r#"{"name": "c", "geometry": {"preset": "circle"}, "strategy": "GMRES-HBS"}"#);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let o = bench(&["run", f.path().to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3", "--threads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("scenario,strategy,N_k,N_c,N_p,k,"));
}

#[test]
fn cli_sweep_emits_one_row_per_value() {
    let f = scenario_file(r#"{"name": "c", "geometry": {"preset": "circle"}, "strategy": "Direct-HBS"}"#);
    let o = bench(&["sweep", f.path().to_str().unwrap(), "--param", "N", "--values", "8,16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("c@8,Direct-HBS,128,"));
    assert!(rows[1].starts_with("c@16,Direct-HBS,256,"));
}

#[test]
fn cli_exit_codes() {
    let geometry = scenario_file(
        r#"{"name": "g", "geometry": {"preset": "circle"}, "strategy": "Direct-HBS",
            "action": {"add_holes": [{"curve": {"kind": "circle", "center": [0.95, 0.0], "scale": 0.1}, "n_panels": 6}]}}"#,
    );
    assert_eq!(bench(&["run", geometry.path().to_str().unwrap()]).status.code(), Some(3));

    let stalls = scenario_file(
        r#"{"name": "n", "geometry": {"preset": "fish", "n_panels": 40}, "strategy": "GMRES-HBS",
            "tolerances": {"max_iter": 2}}"#,
    );
    assert_eq!(bench(&["run", stalls.path().to_str().unwrap()]).status.code(), Some(2));

    let invalid = scenario_file(r#"{"name": "i", "geometry": {"preset": "circle"}, "strategy": "Direct-Local"}"#);
    assert_eq!(bench(&["run", invalid.path().to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(bench(&["run", "/nonexistent/scenario.json"]).status.code(), Some(1));
}
