//! Finite probability spaces, random vectors over them, pricing densities and
//! agent partitions.
//!
//! Every random quantity is stored densely: an `N x M` array whose row `j` is
//! agent `j`'s position across the `M` scenarios. Expectations always
//! accumulate in ascending scenario order so results do not depend on how
//! the per-scenario work was scheduled.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Tolerance on the total mass of the reference probability.
pub const PROB_SUM_TOL: f64 = 1e-12;
/// Tolerance on the normalization `E_P[dQ^j/dP] = 1` of each density row.
pub const DENSITY_NORM_TOL: f64 = 1e-10;

/// Finite outcome set with strictly positive reference probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpace {
    labels: Vec<String>,
    probs: Vec<f64>,
}

impl ScenarioSpace {
    pub fn new(labels: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Invalid(
                "scenario space needs at least one outcome".into(),
            ));
        }
        if labels.len() != probs.len() {
            return Err(Error::Dimension(format!(
                "{} labels for {} probabilities",
                labels.len(),
                probs.len()
            )));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite entry: probability of scenario {i}"
                )));
            }
            if p <= 0.0 {
                return Err(Error::Invalid(format!(
                    "non-positive probability {p} for scenario {i}"
                )));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Invalid(format!(
                "probabilities sum ≠ 1 (sum = {total})"
            )));
        }
        Ok(Self { labels, probs })
    }

    /// Equiprobable space with labels `s0, s1, ...`.
    pub fn uniform(m: usize) -> Result<Self> {
        let labels = (0..m).map(|i| format!("s{i}")).collect();
        Self::new(labels, vec![1.0 / m as f64; m])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `E_P[values]`, summed in ascending scenario order.
    pub fn expect(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.probs.len());
        self.probs
            .iter()
            .zip(values)
            .fold(0.0, |acc, (p, v)| acc + p * v)
    }

    /// `E_P[f(w)]` over scenario indices, ascending order.
    pub fn expect_with(&self, mut f: impl FnMut(usize) -> f64) -> f64 {
        let mut acc = 0.0;
        for (w, p) in self.probs.iter().enumerate() {
            acc += p * f(w);
        }
        acc
    }
}

/// Dense `N x M` array of agent positions (rows) across scenarios (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl Allocation {
    pub fn new(n: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Invalid("allocation needs N >= 1 and M >= 1".into()));
        }
        if values.len() != n * m {
            return Err(Error::Dimension(format!(
                "{} values for a {n}x{m} allocation",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite entry at agent {}, scenario {}",
                pos / m,
                pos % m
            )));
        }
        Ok(Self { n, m, values })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            values: vec![0.0; n * m],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Dimension("ragged allocation rows".into()));
        }
        Self::new(n, m, rows.concat())
    }

    /// Builds an allocation from per-scenario columns.
    pub fn from_columns(n: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let m = columns.len();
        let mut values = vec![0.0; n * m];
        for (w, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::Dimension(format!(
                    "scenario {w} has {} entries, expected {n}",
                    col.len()
                )));
            }
            for (j, v) in col.iter().enumerate() {
                values[j * m + w] = *v;
            }
        }
        Self::new(n, m, values)
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn n_scenarios(&self) -> usize {
        self.m
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.m..(j + 1) * self.m]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.m..(j + 1) * self.m]
    }

    pub fn get(&self, j: usize, w: usize) -> f64 {
        self.values[j * self.m + w]
    }

    pub fn set(&mut self, j: usize, w: usize, v: f64) {
        self.values[j * self.m + w] = v;
    }

    pub fn column(&self, w: usize) -> Vec<f64> {
        (0..self.n).map(|j| self.get(j, w)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|j| self.row(j).to_vec()).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Per-scenario column sums `sum_j Y^j(w)`.
    pub fn aggregate(&self) -> Vec<f64> {
        aggregate(self)
    }

    pub fn zip_map(&self, other: &Allocation, f: impl Fn(f64, f64) -> f64) -> Result<Allocation> {
        self.check_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Allocation {
            n: self.n,
            m: self.m,
            values,
        })
    }

    pub fn add(&self, other: &Allocation) -> Result<Allocation> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Allocation) -> Result<Allocation> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Adds the deterministic vector `shift[j]` to every entry of row `j`.
    pub fn shift_rows(&self, shift: &[f64]) -> Allocation {
        let mut out = self.clone();
        for (j, s) in shift.iter().enumerate().take(self.n) {
            for v in out.row_mut(j) {
                *v += s;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Allocation) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn check_same_shape(&self, other: &Allocation) -> Result<()> {
        if self.n != other.n || self.m != other.m {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.n, self.m, other.n, other.m
            )));
        }
        Ok(())
    }
}

/// Per-agent densities `dQ^j/dP` with respect to the reference probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PricingVector {
    densities: Allocation,
}

impl PricingVector {
    pub fn new(space: &ScenarioSpace, densities: Allocation) -> Result<Self> {
        if densities.n_scenarios() != space.len() {
            return Err(Error::Dimension(format!(
                "density has {} scenarios, space has {}",
                densities.n_scenarios(),
                space.len()
            )));
        }
        for j in 0..densities.n_agents() {
            let row = densities.row(j);
            if let Some(w) = row.iter().position(|d| *d < 0.0) {
                return Err(Error::Invalid(format!(
                    "negative density {} for agent {j} in scenario {w}",
                    row[w]
                )));
            }
            let mass = space.expect(row);
            if (mass - 1.0).abs() > DENSITY_NORM_TOL {
                return Err(Error::Invalid(format!(
                    "density row {j} integrates to {mass}, not 1"
                )));
            }
        }
        Ok(Self { densities })
    }

    /// `Q^j = P` for every agent.
    pub fn uniform(n: usize, m: usize) -> Self {
        Self {
            densities: Allocation {
                n,
                m,
                values: vec![1.0; n * m],
            },
        }
    }

    /// Same density for every agent.
    pub fn common(space: &ScenarioSpace, n: usize, density: &[f64]) -> Result<Self> {
        let rows = vec![density.to_vec(); n];
        Self::new(space, Allocation::from_rows(&rows)?)
    }

    pub fn n_agents(&self) -> usize {
        self.densities.n_agents()
    }

    pub fn n_scenarios(&self) -> usize {
        self.densities.n_scenarios()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.densities.row(j)
    }

    pub fn density(&self, j: usize, w: usize) -> f64 {
        self.densities.get(j, w)
    }

    pub fn column(&self, w: usize) -> Vec<f64> {
        self.densities.column(w)
    }

    pub fn densities(&self) -> &Allocation {
        &self.densities
    }

    /// `Q ~ P`: every density entry strictly positive.
    pub fn is_equivalent(&self) -> bool {
        self.densities.as_slice().iter().all(|d| *d > 0.0)
    }

    pub fn min_density(&self) -> f64 {
        self.densities
            .as_slice()
            .iter()
            .fold(f64::INFINITY, |m, d| m.min(*d))
    }
}

/// Disjoint groups of agents covering `{0, .., N-1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterPartition {
    groups: Vec<Vec<usize>>,
    owner: Vec<usize>,
}

impl ClusterPartition {
    pub fn new(groups: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut owner = vec![usize::MAX; n];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Invalid(format!("cluster {g} is empty")));
            }
            for &j in members {
                if j >= n {
                    return Err(Error::Invalid(format!(
                        "cluster {g} references agent {j}, but N = {n}"
                    )));
                }
                if owner[j] != usize::MAX {
                    return Err(Error::Invalid(format!(
                        "agent {j} appears in more than one cluster"
                    )));
                }
                owner[j] = g;
            }
        }
        if let Some(j) = owner.iter().position(|g| *g == usize::MAX) {
            return Err(Error::Invalid(format!("agent {j} belongs to no cluster")));
        }
        Ok(Self { groups, owner })
    }

    /// One group holding every agent (the feasible set with deterministic total).
    pub fn single(n: usize) -> Self {
        Self {
            groups: vec![(0..n).collect()],
            owner: vec![0; n],
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_agents(&self) -> usize {
        self.owner.len()
    }

    pub fn group_of(&self, j: usize) -> usize {
        self.owner[j]
    }

    pub fn is_single(&self) -> bool {
        self.groups.len() == 1
    }
}

/// Total systemic capital `A` to be allocated at the initial time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget(f64);

impl Budget {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Invalid(format!(
                "budget must be finite, got {value}"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `[E_{Q^1}[Y^1], .., E_{Q^N}[Y^N]]`.
pub fn expectation(space: &ScenarioSpace, y: &Allocation, q: &PricingVector) -> Result<Vec<f64>> {
    if y.n_agents() != q.n_agents()
        || y.n_scenarios() != q.n_scenarios()
        || y.n_scenarios() != space.len()
    {
        return Err(Error::Dimension(format!(
            "Y is {}x{}, Q is {}x{}, space has {} scenarios",
            y.n_agents(),
            y.n_scenarios(),
            q.n_agents(),
            q.n_scenarios(),
            space.len()
        )));
    }
    Ok((0..y.n_agents())
        .map(|j| {
            let (yr, qr) = (y.row(j), q.row(j));
            space.expect_with(|w| qr[w] * yr[w])
        })
        .collect())
}

/// Per-scenario sum over agents.
pub fn aggregate(y: &Allocation) -> Vec<f64> {
    (0..y.m)
        .map(|w| (0..y.n).fold(0.0, |acc, j| acc + y.get(j, w)))
        .collect()
}

/// Reads a scenario CSV with header `scenario,prob,X1,...,XN`.
pub fn load_scenarios(path: impl AsRef<Path>) -> Result<(ScenarioSpace, Allocation)> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_scenarios(&text, path)
}

pub fn parse_scenarios(text: &str, path: &Path) -> Result<(ScenarioSpace, Allocation)> {
    let parse_err = |line: u64, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let header = reader
        .headers()
        .map_err(|e| parse_err(1, 0, format!("unreadable header: {e}")))?
        .clone();
    if header.len() < 3 {
        return Err(parse_err(
            1,
            0,
            "header must be `scenario,prob,X1,...,XN`".into(),
        ));
    }
    if &header[0] != "scenario" {
        return Err(parse_err(
            1,
            1,
            format!("expected `scenario`, found `{}`", &header[0]),
        ));
    }
    if &header[1] != "prob" {
        return Err(parse_err(
            1,
            2,
            format!("expected `prob`, found `{}`", &header[1]),
        ));
    }
    for (k, name) in header.iter().enumerate().skip(2) {
        let expected = format!("X{}", k - 1);
        if name != expected {
            return Err(parse_err(
                1,
                k + 1,
                format!("expected `{expected}`, found `{name}`"),
            ));
        }
    }
    let n = header.len() - 2;

    let mut labels = Vec::new();
    let mut probs = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, 0, format!("malformed row: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != n + 2 {
            return Err(parse_err(
                line,
                0,
                format!("malformed row: {} fields, expected {}", record.len(), n + 2),
            ));
        }
        let field = |k: usize| -> Result<f64> {
            let raw = &record[k];
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(line, k + 1, format!("malformed number `{raw}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, k + 1, format!("non-finite entry `{raw}`")));
            }
            Ok(v)
        };
        let p = field(1)?;
        if p <= 0.0 {
            return Err(parse_err(line, 2, format!("non-positive probability {p}")));
        }
        let col = (0..n).map(|j| field(j + 2)).collect::<Result<Vec<_>>>()?;
        labels.push(record[0].to_string());
        probs.push(p);
        columns.push(col);
    }
    if probs.is_empty() {
        return Err(parse_err(1, 0, "no scenario rows".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(parse_err(
            0,
            2,
            format!("probabilities sum ≠ 1 (sum = {total})"),
        ));
    }
    let space = ScenarioSpace::new(labels, probs)?;
    let x = Allocation::from_columns(n, &columns)?;
    Ok((space, x))
}

/// Writes the canonical scenario CSV; numbers use the shortest round-trip
/// representation so a reload is bit-exact.
pub fn write_scenarios(mut out: impl Write, space: &ScenarioSpace, x: &Allocation) -> Result<()> {
    let mut writer = csv::Writer::from_writer(&mut out);
    let mut header = vec!["scenario".to_string(), "prob".to_string()];
    header.extend((1..=x.n_agents()).map(|j| format!("X{j}")));
    writer.write_record(&header).map_err(csv_io)?;
    for w in 0..space.len() {
        let mut row = vec![space.labels()[w].clone(), format!("{:?}", space.probs()[w])];
        row.extend((0..x.n_agents()).map(|j| format!("{:?}", x.get(j, w))));
        writer.write_record(&row).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<(ScenarioSpace, Allocation)> {
        parse_scenarios(text, Path::new("test.csv"))
    }

    #[test]
    fn parses_two_by_two() {
        let (space, x) = parse("scenario,prob,X1,X2\nup,0.5,1,-1\ndown,0.5,2,0.25\n").unwrap();
        assert_eq!(space.len(), 2);
        assert_eq!((x.n_agents(), x.n_scenarios()), (2, 2));
        assert_eq!(x.row(0), &[1.0, 2.0]);
        assert_eq!(x.row(1), &[-1.0, 0.25]);
    }

    #[test]
    fn rejects_probabilities_not_summing_to_one() {
        let err = parse("scenario,prob,X1\na,0.49,1\nb,0.49,2\n").unwrap_err();
        assert!(err.to_string().contains("probabilities sum ≠ 1"), "{err}");
    }

    #[test]
    fn rejects_nan_with_location() {
        let err = parse("scenario,prob,X1,X2\na,0.5,1,NaN\nb,0.5,2,3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite entry"), "{msg}");
        assert!(msg.contains("line 2") && msg.contains("column 4"), "{msg}");
    }

    #[test]
    fn rejects_zero_probability() {
        let err = parse("scenario,prob,X1\na,0,1\nb,1,2\n").unwrap_err();
        assert!(err.to_string().contains("non-positive probability"));
    }

    #[test]
    fn rejects_bad_header_and_ragged_rows() {
        assert!(parse("scenario,p,X1\na,1,1\n").is_err());
        assert!(parse("scenario,prob,X2\na,1,1\n").is_err());
        let err = parse("scenario,prob,X1,X2\na,1,1\n").unwrap_err();
        assert!(err.to_string().contains("malformed row"), "{err}");
    }

    #[test]
    fn expectation_edge_cases() {
        let space = ScenarioSpace::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![0.2, 0.3, 0.5],
        )
        .unwrap();
        let q = PricingVector::uniform(2, 3);
        let zero = Allocation::zeros(2, 3);
        assert_eq!(expectation(&space, &zero, &q).unwrap(), vec![0.0, 0.0]);

        let consts = Allocation::from_rows(&[vec![1.5; 3], vec![-2.0; 3]]).unwrap();
        let tilted = PricingVector::new(
            &space,
            Allocation::from_rows(&[vec![2.0, 1.0, 0.6], vec![0.5, 0.5, 1.5]]).unwrap(),
        )
        .unwrap();
        let e = expectation(&space, &consts, &tilted).unwrap();
        assert!((e[0] - 1.5).abs() < 1e-15 && (e[1] + 2.0).abs() < 1e-15);

        let bad = Allocation::zeros(3, 3);
        assert!(matches!(
            expectation(&space, &bad, &q),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn aggregate_examples() {
        let y = Allocation::from_rows(&[vec![1.0, 2.0], vec![-1.0, -2.0]]).unwrap();
        assert_eq!(aggregate(&y), vec![0.0, 0.0]);
        assert_eq!(aggregate(&Allocation::zeros(3, 4)), vec![0.0; 4]);
    }

    #[test]
    fn density_validation() {
        let space = ScenarioSpace::uniform(2).unwrap();
        let unnormalized = Allocation::from_rows(&[vec![1.0, 1.5]]).unwrap();
        assert!(PricingVector::new(&space, unnormalized).is_err());
        let boundary =
            PricingVector::new(&space, Allocation::from_rows(&[vec![2.0, 0.0]]).unwrap()).unwrap();
        assert!(!boundary.is_equivalent());
        assert!(PricingVector::uniform(3, 2).is_equivalent());
    }

    #[test]
    fn partition_validation() {
        assert!(ClusterPartition::new(vec![vec![0, 1], vec![2]], 3).is_ok());
        assert!(ClusterPartition::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(ClusterPartition::new(vec![vec![0]], 2).is_err());
        assert!(ClusterPartition::new(vec![vec![0, 1], vec![]], 2).is_err());
        assert!(ClusterPartition::single(4).is_single());
    }

    fn space_and_rows() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
        (1usize..5, 1usize..7).prop_flat_map(|(n, m)| {
            (
                prop::collection::vec(0.05f64..1.0, m),
                prop::collection::vec(prop::collection::vec(-1e3f64..1e3, m), n),
            )
        })
    }

    fn normalized(weights: &[f64]) -> Vec<f64> {
        let s: f64 = weights.iter().sum();
        let mut p: Vec<f64> = weights.iter().map(|w| w / s).collect();
        // push the rounding residue into the last entry
        let rest: f64 = p[..p.len() - 1].iter().sum();
        *p.last_mut().unwrap() = 1.0 - rest;
        p
    }

    proptest! {
        #[test]
        fn uniform_density_expectation_is_weighted_mean((w, rows) in space_and_rows()) {
            let probs = normalized(&w);
            let space = ScenarioSpace::new((0..probs.len()).map(|i| i.to_string()).collect(), probs.clone()).unwrap();
            let y = Allocation::from_rows(&rows).unwrap();
            let e = expectation(&space, &y, &PricingVector::uniform(y.n_agents(), y.n_scenarios())).unwrap();
            for (j, row) in rows.iter().enumerate() {
                let mean: f64 = row.iter().zip(&probs).map(|(v, p)| v * p).sum();
                prop_assert!((e[j] - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
            }
        }

        #[test]
        fn aggregate_is_linear_in_each_row((_, rows) in space_and_rows(), c in -10.0f64..10.0, pick in 0usize..100) {
            let y = Allocation::from_rows(&rows).unwrap();
            let j = pick % y.n_agents();
            let mut shift = vec![0.0; y.n_agents()];
            shift[j] = c;
            let before = aggregate(&y);
            let after = aggregate(&y.shift_rows(&shift));
            for (a, b) in after.iter().zip(&before) {
                prop_assert!((a - (b + c)).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn csv_round_trip_is_bit_exact((w, rows) in space_and_rows()) {
            let probs = normalized(&w);
            let labels = (0..probs.len()).map(|i| format!("w{i}")).collect();
            let space = ScenarioSpace::new(labels, probs).unwrap();
            let x = Allocation::from_rows(&rows).unwrap();
            let mut buf = Vec::new();
            write_scenarios(&mut buf, &space, &x).unwrap();
            let (space2, x2) = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
            prop_assert_eq!(space.probs().iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
                            space2.probs().iter().map(|p| p.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            x2.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(space.labels(), space2.labels());
        }
    }
}
