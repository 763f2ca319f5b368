use std::io::Write;

use crate::runner::{BatchSummary, RunReport};
use crate::BenchError;

/// Leading columns are fixed; later ones are optional extras.
pub const COLUMNS: [&str; 23] = [
    "scenario", "strategy", "N_k", "N_c", "N_p", "k", "T_comp", "T_inv", "T_Dsol", "T_Gsol", "T_PGsol", "n_iter", "E",
    "snapshot", "k_kc", "k_kp", "k_pk", "T_pre", "MinSol", "T_static", "T_Osol", "T_Rsol", "kappa_W",
];

pub const SUMMARY_COLUMNS: [&str; 8] = ["scenario", "strategy", "T_static", "T_Osol", "T_Rsol", "n_osol", "n_rsol", "max_E"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn sci(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4e}")).unwrap_or_default()
}

fn row(r: &RunReport) -> Vec<String> {
    vec![
        r.scenario.clone(),
        r.strategy.clone(),
        r.n_k.to_string(),
        r.n_c.to_string(),
        r.n_p.to_string(),
        opt(r.k),
        sci(r.t_comp),
        sci(r.t_inv),
        sci(r.t_dsol),
        sci(r.t_gsol),
        sci(r.t_pgsol),
        opt(r.n_iter),
        format!("{:.4e}", r.e),
        opt(r.snapshot),
        opt(r.k_kc),
        opt(r.k_kp),
        opt(r.k_pk),
        sci(r.t_pre),
        opt(r.min_sol),
        sci(r.t_static),
        sci(r.t_osol),
        sci(r.t_rsol),
        sci(r.conditioning.as_ref().map(|c| c.kappa_w)),
    ]
}

pub fn write_reports<W: Write>(w: W, reports: &[RunReport]) -> Result<(), BenchError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(COLUMNS)?;
    for r in reports {
        wr.write_record(row(r))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_summaries<W: Write>(w: W, rows: &[BatchSummary]) -> Result<(), BenchError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(SUMMARY_COLUMNS)?;
    for s in rows {
        wr.write_record([
            s.scenario.clone(),
            s.strategy.clone(),
            format!("{:.4e}", s.t_static),
            sci(s.t_osol),
            sci(s.t_rsol),
            s.n_osol.to_string(),
            s.n_rsol.to_string(),
            format!("{:.4e}", s.max_e),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
