use std::fmt::Write as _;
use std::path::Path;

use msorte::equilibrium::{CheckReport, EquilibriumCertificate, EquilibriumTriple};
use msorte::json::format_g17;
use msorte::scenario::{Allocation, ClusterPartition, ScenarioSpace};
use msorte::utility::UtilitySpec;

pub fn residual_table(report: &CheckReport) -> String {
    let width = report.items.iter().map(|i| i.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for item in &report.items {
        let _ = writeln!(
            out,
            "  {:<width$}  {:>12.4e}  tol {:>10.3e}  {}",
            item.name,
            item.value,
            item.tolerance,
            if item.passed { "ok" } else { "FAIL" }
        );
    }
    out
}

pub fn summary(
    cert: &EquilibriumCertificate,
    report: &CheckReport,
    space: &ScenarioSpace,
    u: &UtilitySpec,
    partition: &ClusterPartition,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mSORTE certificate");
    let _ = writeln!(s, "  family        {}", u.family().as_str());
    let _ = writeln!(s, "  agents        {}", u.n());
    let _ = writeln!(s, "  scenarios     {}", space.len());
    let _ = writeln!(s, "  clusters      {:?}", partition.groups());
    let _ = writeln!(s, "  budget        {}", format_g17(cert.triple.budget));
    let _ = writeln!(s, "  config hash   {}", cert.meta.config_hash);
    let _ = writeln!(s);
    let _ = writeln!(s, "values");
    let _ = writeln!(s, "  primal        {}", format_g17(cert.values.primal));
    let _ = writeln!(s, "  dual          {}", format_g17(cert.values.dual));
    let _ = writeln!(s, "  gap           {:e}", cert.values.gap);
    let _ = writeln!(s, "  lambda        {}", format_g17(cert.lambda));
    let _ = writeln!(s);
    let _ = writeln!(s, "initial capital allocation");
    for (j, a) in cert.triple.a.iter().enumerate() {
        let _ = writeln!(s, "  a_{:<3}         {}", j + 1, format_g17(*a));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "checks");
    s.push_str(&residual_table(report));
    let _ = writeln!(s);
    let f = &cert.flags;
    let _ = writeln!(
        s,
        "flags: unique={} differentiable={} oracle_checked={} approximate={} dual_unique={} measurability_checked={}",
        f.unique, f.differentiable, f.oracle_checked, f.approximate, f.dual_unique, f.measurability_checked
    );
    for w in warnings(cert) {
        let _ = writeln!(s, "warning: {w}");
    }
    let _ = writeln!(
        s,
        "verdict: {}",
        if report.passed() { "PASS" } else { "FAIL" }
    );
    s
}

pub fn warnings(cert: &EquilibriumCertificate) -> Vec<&'static str> {
    let mut out = Vec::new();
    if cert.flags.approximate {
        out.push(
            "derivative-free searches were used; residuals are checked at loosened tolerances",
        );
    }
    if !cert.flags.dual_unique {
        out.push(
            "the utility is not differentiable, so the dual optimum (lambda, Q) may not be unique",
        );
    }
    out
}

/// Per-scenario and per-agent tables for external plotting.
pub fn write_tables(
    dir: &Path,
    space: &ScenarioSpace,
    x: &Allocation,
    t: &EquilibriumTriple,
    partition: &ClusterPartition,
) -> csv::Result<()> {
    let n = x.n_agents();
    let y_hat = t.y_tilde.shift_rows(&t.a);
    let xbar = x.aggregate();

    let mut scen = csv::Writer::from_path(dir.join("scenarios.csv"))?;
    let mut header = vec!["scenario".to_string(), "prob".into(), "xbar".into()];
    for prefix in ["q", "X", "Y_hat", "Y_tilde"] {
        header.extend((1..=n).map(|j| format!("{prefix}{j}")));
    }
    scen.write_record(&header)?;
    for (w, s) in xbar.iter().enumerate() {
        let mut row = vec![
            space.labels()[w].clone(),
            format_g17(space.probs()[w]),
            format_g17(*s),
        ];
        for table in [t.q.densities(), x, &y_hat, &t.y_tilde] {
            row.extend((0..n).map(|j| format_g17(table.get(j, w))));
        }
        scen.write_record(&row)?;
    }
    scen.flush()?;

    let mut agents = csv::Writer::from_path(dir.join("agents.csv"))?;
    agents.write_record(["agent", "cluster", "a", "expected_x"])?;
    for j in 0..n {
        agents.write_record([
            (j + 1).to_string(),
            partition.group_of(j).to_string(),
            format_g17(t.a[j]),
            format_g17(space.expect(x.row(j))),
        ])?;
    }
    agents.flush()?;
    Ok(())
}
