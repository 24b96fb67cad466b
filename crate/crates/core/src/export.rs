//! CSV and JSON-lines writers for policies, recursion traces and
//! verification reports. Numbers use the shortest round-trip representation,
//! so identical inputs give byte-identical output.

use std::io::{self, Write};

use nalgebra::DVector;
use serde::Serialize;

use crate::feedback::FeedbackSolution;
use crate::mixed::MixedSolution;
use crate::open_loop::OpenLoopSolution;
use crate::oracle::{Semantics, VerificationReport};
use crate::policy::AffinePolicy;
use crate::scalar::Real;

fn indexed(prefix: &str, m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("{prefix}_{i}")).collect()
}

fn cells<T: Real>(v: Option<&DVector<T>>, m: usize) -> Vec<String> {
    match v {
        Some(v) => v.iter().map(|x| x.as_f64().to_string()).collect(),
        None => vec![String::new(); m],
    }
}

fn num<T: Real>(x: T) -> String {
    x.as_f64().to_string()
}

fn write_row<W: Write>(w: &mut W, row: &[String]) -> io::Result<()> {
    writeln!(w, "{}", row.join(","))
}

/// `stage,K_1..K_m,c_1..c_m`, one row per stage.
pub fn write_policy_csv<W: Write, T: Real>(w: &mut W, policy: &AffinePolicy<T>) -> io::Result<()> {
    let m = policy.gains.first().map_or(0, |g| g.len());
    let mut header = vec!["stage".to_string()];
    header.extend(indexed("K", m));
    header.extend(indexed("c", m));
    write_row(w, &header)?;
    for k in policy.start_stage..policy.end_stage() {
        let mut row = vec![k.to_string()];
        row.extend(cells(Some(policy.gain(k)), m));
        row.extend(cells(Some(policy.offset(k)), m));
        write_row(w, &row)?;
    }
    Ok(())
}

/// Rows for stages `t..=N`; vector columns are empty at `N`.
pub fn write_open_loop_trace_csv<W: Write, T: Real>(
    w: &mut W,
    solution: &OpenLoopSolution<T>,
) -> io::Result<()> {
    let tr = &solution.trace;
    let p = &solution.policy;
    let m = p.gains.first().map_or(0, |g| g.len());
    let mut header: Vec<String> = ["stage", "st_sum", "s_hat", "u_hat", "pi_hat", "range_ok", "range_residual"]
        .map(String::from)
        .to_vec();
    header.extend(indexed("L_hat", m));
    header.extend(indexed("K", m));
    header.extend(indexed("c", m));
    write_row(w, &header)?;
    for i in 0..tr.st_sum.len() {
        let k = tr.start_stage + i;
        let active = i < tr.range_ok.len();
        let mut row = vec![
            k.to_string(),
            num(tr.st_sum[i]),
            num(tr.s_hat[i]),
            num(tr.u_hat[i]),
            num(tr.pi_hat[i]),
            if active { tr.range_ok[i].to_string() } else { String::new() },
            if active { num(tr.range_residual[i]) } else { String::new() },
        ];
        row.extend(cells(active.then(|| &tr.l_hat[i]), m));
        row.extend(cells(active.then(|| p.gain(k)), m));
        row.extend(cells(active.then(|| p.offset(k)), m));
        write_row(w, &row)?;
    }
    Ok(())
}

pub fn write_feedback_trace_csv<W: Write, T: Real>(
    w: &mut W,
    solution: &FeedbackSolution<T>,
) -> io::Result<()> {
    let tr = &solution.trace;
    let p = &solution.policy;
    let m = p.gains.first().map_or(0, |g| g.len());
    let mut header: Vec<String> = [
        "stage",
        "s_tilde",
        "scal_tilde",
        "u_tilde",
        "pi_tilde",
        "closed_loop",
        "o_min_eig",
        "solvable",
        "residual_l",
        "residual_theta",
    ]
    .map(String::from)
    .to_vec();
    header.extend(indexed("beta", m));
    header.extend(indexed("phi", m));
    header.extend(indexed("v", m));
    write_row(w, &header)?;
    for i in 0..tr.s_tilde.len() {
        let k = tr.start_stage + i;
        let active = i < tr.solvable.len();
        let opt = |v: &[T]| if active { num(v[i]) } else { String::new() };
        let mut row = vec![
            k.to_string(),
            num(tr.s_tilde[i]),
            num(tr.scal_tilde[i]),
            num(tr.u_tilde[i]),
            num(tr.pi_tilde[i]),
            opt(&tr.closed_loop),
            opt(&tr.o_min_eig),
            if active { tr.solvable[i].to_string() } else { String::new() },
            opt(&tr.residual_l),
            opt(&tr.residual_theta),
        ];
        row.extend(cells(active.then(|| &tr.beta_tilde[i]), m));
        row.extend(cells(active.then(|| p.gain(k)), m));
        row.extend(cells(active.then(|| p.offset(k)), m));
        write_row(w, &row)?;
    }
    Ok(())
}

pub fn write_mixed_trace_csv<W: Write, T: Real>(w: &mut W, solution: &MixedSolution<T>) -> io::Result<()> {
    let tr = &solution.trace;
    let p = &solution.policy;
    let m = p.gains.first().map_or(0, |g| g.len());
    let mut header: Vec<String> = [
        "stage", "s", "scal", "t", "tcal", "u", "pi", "solvable", "residual_l", "residual_theta",
        "o_s_psd",
    ]
    .map(String::from)
    .to_vec();
    header.extend(indexed("o_eig", m));
    header.extend(indexed("beta", m));
    header.extend(indexed("phi", m));
    header.extend(indexed("K", m));
    header.extend(indexed("c", m));
    write_row(w, &header)?;
    for i in 0..tr.s.len() {
        let k = tr.start_stage + i;
        let active = i < tr.solvable.len();
        let opt = |v: &[T]| if active { num(v[i]) } else { String::new() };
        let flag = |v: &[bool]| if active { v[i].to_string() } else { String::new() };
        let mut row = vec![
            k.to_string(),
            num(tr.s[i]),
            num(tr.scal[i]),
            num(tr.t_[i]),
            num(tr.tcal[i]),
            num(tr.u[i]),
            num(tr.pi[i]),
            flag(&tr.solvable),
            opt(&tr.residual_l),
            opt(&tr.residual_theta),
            flag(&tr.o_s_psd),
        ];
        let eig = active.then(|| DVector::from_vec(tr.o_eigs[i].clone()));
        row.extend(cells(eig.as_ref(), m));
        row.extend(cells(active.then(|| &tr.beta[i]), m));
        row.extend(cells(active.then(|| solution.phi.stage(k)), m));
        row.extend(cells(active.then(|| p.gain(k)), m));
        row.extend(cells(active.then(|| p.offset(k)), m));
        write_row(w, &row)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    record: &'static str,
    semantics: Semantics,
    nodes: usize,
    failures: usize,
    min_gap: f64,
    min_scaled_gap: f64,
    passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    worst: Option<&'a crate::oracle::DeviationReport>,
}

/// One JSON object per node (`"record": "node"`), then a summary record.
/// Non-finite gaps serialize as `null`.
pub fn write_verification_jsonl<W: Write>(w: &mut W, report: &VerificationReport) -> io::Result<()> {
    #[derive(Serialize)]
    struct NodeRecord<'a> {
        record: &'static str,
        #[serde(flatten)]
        inner: &'a crate::oracle::DeviationReport,
    }
    for r in &report.records {
        serde_json::to_writer(&mut *w, &NodeRecord { record: "node", inner: r })?;
        writeln!(w)?;
    }
    let worst = report
        .records
        .iter()
        .min_by(|a, b| (a.gap / a.tol).total_cmp(&(b.gap / b.tol)));
    serde_json::to_writer(
        &mut *w,
        &SummaryRecord {
            record: "summary",
            semantics: report.semantics,
            nodes: report.records.len(),
            failures: report.failures().count(),
            min_gap: report.min_gap,
            min_scaled_gap: report.min_scaled_gap,
            passed: report.passed,
            worst,
        },
    )?;
    writeln!(w)
}
