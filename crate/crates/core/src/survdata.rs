//! Right-censored grouped survival data.
//!
//! Groups are indexed `0..k` internally. When the data come with a factorial
//! layout, the group index is the row-major position of the level combination
//! over the factors in the order they were given, with the levels of each
//! factor ordered by first appearance in the input.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Observation {
    pub time: f64,
    /// 1 = event observed, 0 = censored.
    pub status: u8,
    pub group: usize,
}

impl Observation {
    pub fn new(time: f64, event: bool, group: usize) -> Self {
        Self {
            time,
            status: u8::from(event),
            group,
        }
    }

    pub fn is_event(&self) -> bool {
        self.status == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
}

impl Factor {
    pub fn new(name: impl Into<String>, levels: Vec<String>) -> Self {
        Self {
            name: name.into(),
            levels,
        }
    }
}

/// Crossed factors whose level combinations make up the groups.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorialLayout {
    factors: Vec<Factor>,
}

impl FactorialLayout {
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidConfig("layout without factors".into()));
        }
        for f in &factors {
            if f.levels.len() < 2 && factors.len() == 1 {
                return Err(Error::TooFewGroups(f.levels.len()));
            }
            if f.levels.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "factor `{}` has no levels",
                    f.name
                )));
            }
            let mut seen = std::collections::HashSet::new();
            if !f.levels.iter().all(|l| seen.insert(l)) {
                return Err(Error::InvalidConfig(format!(
                    "factor `{}` has repeated levels",
                    f.name
                )));
            }
        }
        let mut names = std::collections::HashSet::new();
        if !factors.iter().all(|f| names.insert(&f.name)) {
            return Err(Error::InvalidConfig("repeated factor name".into()));
        }
        Ok(Self { factors })
    }

    /// Layout with generic factor and level names, e.g. `[2, 3]` for a 2×3 design.
    pub fn from_level_counts(counts: &[usize]) -> Result<Self> {
        let factors = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let name = ((b'A' + i as u8) as char).to_string();
                let levels = (1..=c).map(|l| format!("{name}{l}")).collect();
                Factor::new(name, levels)
            })
            .collect();
        Self::new(factors)
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.levels.len()).collect()
    }

    /// Number of groups, the product of the level counts.
    pub fn k(&self) -> usize {
        self.factors.iter().map(|f| f.levels.len()).product()
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    /// Row-major group index of a level combination.
    pub fn group_of(&self, levels: &[usize]) -> usize {
        debug_assert_eq!(levels.len(), self.factors.len());
        levels
            .iter()
            .zip(&self.factors)
            .fold(0, |acc, (&l, f)| acc * f.levels.len() + l)
    }

    /// Inverse of [`FactorialLayout::group_of`].
    pub fn levels_of(&self, mut group: usize) -> Vec<usize> {
        let mut out = vec![0; self.factors.len()];
        for (slot, f) in out.iter_mut().zip(&self.factors).rev() {
            *slot = group % f.levels.len();
            group /= f.levels.len();
        }
        out
    }

    pub fn group_label(&self, group: usize) -> String {
        self.levels_of(group)
            .iter()
            .zip(&self.factors)
            .map(|(&l, f)| f.levels[l].as_str())
            .collect::<Vec<_>>()
            .join(":")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalDataset {
    observations: Vec<Observation>,
    k: usize,
    sizes: Vec<usize>,
    layout: Option<FactorialLayout>,
}

impl SurvivalDataset {
    /// Checks every observation and that each of the `k` groups is occupied.
    pub fn new(
        observations: Vec<Observation>,
        k: usize,
        layout: Option<FactorialLayout>,
    ) -> Result<Self> {
        if let Some(l) = &layout {
            if l.k() != k {
                return Err(Error::InvalidConfig(format!(
                    "layout has {} cells but k = {k}",
                    l.k()
                )));
            }
        }
        if observations.is_empty() {
            return Err(Error::NoRows);
        }
        if k < 2 {
            return Err(Error::TooFewGroups(k));
        }
        let mut sizes = vec![0; k];
        for (i, o) in observations.iter().enumerate() {
            if !(o.time.is_finite() && o.time > 0.0) {
                return Err(Error::InvalidObservation(format!(
                    "observation {i}: time {} is not positive",
                    o.time
                )));
            }
            if o.status > 1 {
                return Err(Error::InvalidObservation(format!(
                    "observation {i}: status {}",
                    o.status
                )));
            }
            if o.group >= k {
                return Err(Error::InvalidObservation(format!(
                    "observation {i}: group {} outside 0..{k}",
                    o.group
                )));
            }
            sizes[o.group] += 1;
        }
        if let Some(j) = sizes.iter().position(|&c| c == 0) {
            let label = layout
                .as_ref()
                .map_or_else(|| format!("{}", j + 1), |l| l.group_label(j));
            return Err(Error::EmptyGroup(label));
        }
        Ok(Self {
            observations,
            k,
            sizes,
            layout,
        })
    }

    pub fn from_columns(
        times: &[f64],
        events: &[bool],
        groups: &[usize],
        k: usize,
    ) -> Result<Self> {
        if times.len() != events.len() || times.len() != groups.len() {
            return Err(Error::InvalidConfig("column lengths differ".into()));
        }
        let obs = times
            .iter()
            .zip(events)
            .zip(groups)
            .map(|((&t, &e), &g)| Observation::new(t, e, g))
            .collect();
        Self::new(obs, k, None)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layout(&self) -> Option<&FactorialLayout> {
        self.layout.as_ref()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.observations.iter().map(|o| o.group).collect()
    }

    pub fn group_label(&self, group: usize) -> String {
        match &self.layout {
            Some(l) => l.group_label(group),
            None => format!("group{}", group + 1),
        }
    }

    /// Same observations with group memberships replaced by `labels`.
    pub fn relabeled(&self, labels: &[usize]) -> Result<Self> {
        let obs = self
            .observations
            .iter()
            .zip(labels)
            .map(|(o, &g)| Observation { group: g, ..*o })
            .collect();
        Self::new(obs, self.k, self.layout.clone())
    }

    /// Writes `time,status,<factor columns>` (or `time,status,group`) with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Csv {
            line: 0,
            message: e.to_string(),
        };
        let mut header = vec!["time".to_string(), "status".to_string()];
        match &self.layout {
            Some(l) => header.extend(l.factors().iter().map(|f| f.name.clone())),
            None => header.push("group".into()),
        }
        w.write_record(&header).map_err(csv_err)?;
        for o in &self.observations {
            let mut rec = vec![format!("{}", o.time), o.status.to_string()];
            match &self.layout {
                Some(l) => rec.extend(
                    l.levels_of(o.group)
                        .iter()
                        .zip(l.factors())
                        .map(|(&lv, f)| f.levels[lv].clone()),
                ),
                None => rec.push(format!("group{}", o.group + 1)),
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<output>".into(),
            source: e,
        })?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StatusCoding {
    /// `0` / `1`.
    #[default]
    Numeric,
    /// `event` / `censored` (case-insensitive); numeric codes are accepted too.
    Text,
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub time_col: String,
    pub status_col: String,
    pub factor_cols: Vec<String>,
    pub status_coding: StatusCoding,
}

impl CsvOptions {
    pub fn new(time_col: &str, status_col: &str, factor_cols: &[&str]) -> Self {
        Self {
            time_col: time_col.into(),
            status_col: status_col.into(),
            factor_cols: factor_cols.iter().map(|s| s.to_string()).collect(),
            status_coding: StatusCoding::Numeric,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<SurvivalDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, opts)
}

fn parse_status(raw: &str, coding: StatusCoding) -> Option<u8> {
    match raw.trim() {
        "0" => Some(0),
        "1" => Some(1),
        s if coding == StatusCoding::Text => {
            if s.eq_ignore_ascii_case("event") {
                Some(1)
            } else if s.eq_ignore_ascii_case("censored") {
                Some(0)
            } else {
                None
            }
        }
        _ => None,
    }
}

pub fn read_csv<R: Read>(input: R, opts: &CsvOptions) -> Result<SurvivalDataset> {
    if opts.factor_cols.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one factor column is required".into(),
        ));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let csv_err = |e: csv::Error| Error::Csv {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    };
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.is_empty() {
        return Err(Error::NoRows);
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let time_idx = col(&opts.time_col)?;
    let status_idx = col(&opts.status_col)?;
    let factor_idx = opts
        .factor_cols
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;

    let mut levels: Vec<Vec<String>> = vec![Vec::new(); factor_idx.len()];
    let mut raw = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let t_raw = field(time_idx);
        let time: f64 = match t_raw.parse() {
            Ok(t) if f64::is_finite(t) && t > 0.0 => t,
            _ => {
                return Err(Error::NonPositiveTime {
                    line,
                    value: t_raw.to_string(),
                })
            }
        };
        let s_raw = field(status_idx);
        let status = parse_status(s_raw, opts.status_coding).ok_or_else(|| Error::BadStatus {
            line,
            value: s_raw.to_string(),
        })?;
        let mut combo = Vec::with_capacity(factor_idx.len());
        for (f, &ci) in factor_idx.iter().enumerate() {
            let v = field(ci);
            let pos = match levels[f].iter().position(|l| l == v) {
                Some(p) => p,
                None => {
                    levels[f].push(v.to_string());
                    levels[f].len() - 1
                }
            };
            combo.push(pos);
        }
        raw.push((time, status, combo));
    }
    if raw.is_empty() {
        return Err(Error::NoRows);
    }
    let factors = opts
        .factor_cols
        .iter()
        .zip(levels)
        .map(|(n, l)| Factor::new(n.clone(), l))
        .collect();
    let layout = FactorialLayout::new(factors)?;
    let obs = raw
        .into_iter()
        .map(|(time, status, combo)| Observation {
            time,
            status,
            group: layout.group_of(&combo),
        })
        .collect();
    let k = layout.k();
    SurvivalDataset::new(obs, k, Some(layout))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Issue {
    pub severity: Severity,
    pub group: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub label: String,
    pub n: usize,
    pub events: usize,
    pub censoring_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub groups: Vec<GroupSummary>,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn has_errors(&self) -> bool {
        self.issues.iter().any(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues
            .iter()
            .filter(|i| i.severity == Severity::Warning)
    }
}

pub fn validate(ds: &SurvivalDataset) -> ValidationReport {
    let mut events = vec![0usize; ds.k()];
    for o in ds.observations() {
        events[o.group] += usize::from(o.status);
    }
    let mut issues = Vec::new();
    let groups = (0..ds.k())
        .map(|j| {
            let n = ds.sizes()[j];
            let label = ds.group_label(j);
            if n == 0 {
                issues.push(Issue {
                    severity: Severity::Error,
                    group: j,
                    message: format!("group {label} is empty"),
                });
            } else if events[j] == 0 {
                issues.push(Issue {
                    severity: Severity::Warning,
                    group: j,
                    message: format!("group {label} has no observed events"),
                });
            }
            GroupSummary {
                label,
                n,
                events: events[j],
                censoring_fraction: if n == 0 {
                    0.0
                } else {
                    1.0 - events[j] as f64 / n as f64
                },
            }
        })
        .collect();
    ValidationReport { groups, issues }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> CsvOptions {
        CsvOptions::new("time", "status", &["trt", "cell"])
    }

    #[test]
    fn row_major_group_indexing() {
        let csv = "time,status,trt,cell\n1,1,a,x\n2,0,a,y\n3,1,b,x\n4,1,b,y\n5,1,a,z\n6,1,b,z\n";
        let ds = read_csv(csv.as_bytes(), &opts()).unwrap();
        assert_eq!(ds.k(), 6);
        let groups: Vec<_> = ds.observations().iter().map(|o| o.group).collect();
        // levels: trt = [a, b], cell = [x, y, z]
        assert_eq!(groups, vec![0, 1, 3, 4, 2, 5]);
        let layout = ds.layout().unwrap();
        for g in 0..6 {
            assert_eq!(layout.group_of(&layout.levels_of(g)), g);
        }
        assert_eq!(layout.group_label(5), "b:z");
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(
            read_csv("".as_bytes(), &opts()),
            Err(Error::NoRows)
        ));
        assert!(matches!(
            read_csv("time,status,trt,cell\n".as_bytes(), &opts()),
            Err(Error::NoRows)
        ));
    }

    #[test]
    fn status_two_is_bad() {
        let csv = "time,status,trt,cell\n1,1,a,x\n2,2,b,x\n";
        match read_csv(csv.as_bytes(), &opts()) {
            Err(Error::BadStatus { line, value }) => {
                assert_eq!(line, 3);
                assert_eq!(value, "2");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nonpositive_time_and_missing_column() {
        let csv = "time,status,trt,cell\n0,1,a,x\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &opts()),
            Err(Error::NonPositiveTime { line: 2, .. })
        ));
        let csv = "time,status,trt\n1,1,a\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &opts()),
            Err(Error::MissingColumn(c)) if c == "cell"
        ));
    }

    #[test]
    fn missing_cell_is_an_empty_group() {
        let csv = "time,status,trt,cell\n1,1,a,x\n2,1,a,y\n3,1,b,x\n";
        match read_csv(csv.as_bytes(), &opts()) {
            Err(Error::EmptyGroup(label)) => assert_eq!(label, "b:y"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn textual_status() {
        let mut o = CsvOptions::new("time", "status", &["g"]);
        o.status_coding = StatusCoding::Text;
        let csv = "time,status,g\n1,event,a\n2,Censored,b\n3,1,b\n";
        let ds = read_csv(csv.as_bytes(), &o).unwrap();
        let st: Vec<_> = ds.observations().iter().map(|o| o.status).collect();
        assert_eq!(st, vec![1, 0, 1]);
        o.status_coding = StatusCoding::Numeric;
        assert!(read_csv(csv.as_bytes(), &o).is_err());
    }

    #[test]
    fn validation_flags_event_free_group() {
        let ds = SurvivalDataset::from_columns(
            &[1.0, 2.0, 3.0, 4.0],
            &[true, true, false, false],
            &[0, 0, 1, 1],
            2,
        )
        .unwrap();
        let rep = validate(&ds);
        assert_eq!(rep.warnings().count(), 1);
        assert!(!rep.has_errors());
        assert_eq!(rep.groups[1].censoring_fraction, 1.0);

        let ds = SurvivalDataset::from_columns(&[1.0, 2.0], &[true, true], &[0, 1], 2).unwrap();
        assert!(validate(&ds).issues.is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let csv = "time,status,trt,cell\n1.5,1,a,x\n2,0,a,y\n3.25,1,b,x\n4,1,b,y\n";
        let ds = read_csv(csv.as_bytes(), &opts()).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let again = read_csv(buf.as_slice(), &opts()).unwrap();
        assert_eq!(ds, again);
    }
}
