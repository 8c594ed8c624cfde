//! Doubly censored observations, cohorts, and their CSV representation.
//!
//! Each subject has a censoring window `[l, u]`. An event time inside the window
//! is observed exactly; below it the subject is left-censored at `l`, above it
//! right-censored at `u`. Every subject carries one surrogate outcome censored by
//! the same window; only labeled subjects carry the true outcome.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for equality checks against window endpoints.
pub const WINDOW_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CensoringCode {
    Exact,
    Right,
    Left,
}

impl CensoringCode {
    /// On-disk integer code: 1 exact, 2 right, 3 left.
    pub fn code(self) -> u8 {
        match self {
            CensoringCode::Exact => 1,
            CensoringCode::Right => 2,
            CensoringCode::Left => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(CensoringCode::Exact),
            2 => Some(CensoringCode::Right),
            3 => Some(CensoringCode::Left),
            _ => None,
        }
    }
}

/// An observed (possibly censored) time together with its censoring code.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub x: f64,
    pub delta: CensoringCode,
}

/// Censors the event time `t` by the window `[l, u]`.
pub fn derive_observation(t: f64, l: f64, u: f64) -> Result<Outcome> {
    if !(l < u) {
        return Err(Error::Domain(format!("censoring window requires l < u, got l={l}, u={u}")));
    }
    if !t.is_finite() {
        return Err(Error::Domain(format!("event time must be finite, got {t}")));
    }
    let delta = if t < l {
        CensoringCode::Left
    } else if t > u {
        CensoringCode::Right
    } else {
        CensoringCode::Exact
    };
    Ok(Outcome { x: l.max(t.min(u)), delta })
}

fn check_outcome(o: &Outcome, l: f64, u: f64, what: &str) -> std::result::Result<(), String> {
    if !o.x.is_finite() {
        return Err(format!("{what}: non-finite time {}", o.x));
    }
    match o.delta {
        CensoringCode::Left if (o.x - l).abs() > WINDOW_TOL => {
            Err(format!("{what}: left-censored but x={} differs from l={l}", o.x))
        }
        CensoringCode::Right if (o.x - u).abs() > WINDOW_TOL => {
            Err(format!("{what}: right-censored but x={} differs from u={u}", o.x))
        }
        CensoringCode::Exact if o.x < l - WINDOW_TOL || o.x > u + WINDOW_TOL => {
            Err(format!("{what}: exact time x={} outside window [{l}, {u}]", o.x))
        }
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// True outcome; present exactly for labeled subjects.
    pub outcome: Option<Outcome>,
    pub l: f64,
    pub u: f64,
    pub surrogate: Outcome,
    pub z: Vec<f64>,
}

impl SubjectRecord {
    pub fn labeled(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.l.is_finite() && self.u.is_finite()) {
            return Err("non-finite censoring window".into());
        }
        if !(self.l < self.u) {
            return Err(format!("l={} must be strictly below u={}", self.l, self.u));
        }
        if let Some(o) = &self.outcome {
            check_outcome(o, self.l, self.u, "true outcome")?;
        }
        check_outcome(&self.surrogate, self.l, self.u, "surrogate outcome")?;
        if let Some(j) = self.z.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite covariate z{}", j + 1));
        }
        Ok(())
    }
}

/// A validated collection of subjects sharing the covariate dimension `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    records: Vec<SubjectRecord>,
    p: usize,
}

impl Cohort {
    pub fn new(records: Vec<SubjectRecord>, p: usize) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.z.len() != p {
                return Err(Error::InvalidRecord {
                    row: i + 1,
                    msg: format!("expected {p} covariates, found {}", r.z.len()),
                });
            }
            r.validate().map_err(|msg| Error::InvalidRecord { row: i + 1, msg })?;
        }
        Ok(Self { records, p })
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_labeled(&self) -> usize {
        self.records.iter().filter(|r| r.labeled()).count()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.len() - self.n_labeled()
    }

    /// Label fraction n/(n+N); `None` when there are no unlabeled subjects.
    pub fn rho(&self) -> Option<f64> {
        let big_n = self.n_unlabeled();
        (big_n > 0).then(|| self.n_labeled() as f64 / self.len() as f64)
    }

    /// Partitions by the labeled flag, preserving order.
    pub fn split(&self) -> (Cohort, Cohort) {
        let (lab, unlab): (Vec<_>, Vec<_>) = self.records.iter().cloned().partition(|r| r.labeled());
        (
            Cohort { records: lab, p: self.p },
            Cohort { records: unlab, p: self.p },
        )
    }

    /// Concatenates two cohorts with equal `p`.
    pub fn concat(&self, other: &Cohort) -> Result<Cohort> {
        if self.p != other.p {
            return Err(Error::Dimension(format!("p={} vs p={}", self.p, other.p)));
        }
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Ok(Cohort { records, p: self.p })
    }

    /// True outcomes of the labeled subjects.
    pub fn true_outcomes(&self) -> EventData {
        let rows: Vec<_> = self
            .records
            .iter()
            .filter_map(|r| r.outcome.map(|o| (o, r)))
            .collect();
        EventData::from_rows(self.p, rows.into_iter())
    }

    /// Surrogate outcomes of every subject.
    pub fn surrogate_outcomes(&self) -> EventData {
        EventData::from_rows(self.p, self.records.iter().map(|r| (r.surrogate, r)))
    }
}

/// Column-oriented view of one outcome (true or surrogate) for model fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct EventData {
    pub x: Vec<f64>,
    pub delta: Vec<CensoringCode>,
    pub l: Vec<f64>,
    /// Row-major `len × p` covariates.
    pub z: Vec<f64>,
    pub p: usize,
}

impl EventData {
    fn from_rows<'a>(p: usize, rows: impl Iterator<Item = (Outcome, &'a SubjectRecord)>) -> Self {
        let mut d = EventData { x: vec![], delta: vec![], l: vec![], z: vec![], p };
        for (o, r) in rows {
            d.x.push(o.x);
            d.delta.push(o.delta);
            d.l.push(r.l);
            d.z.extend_from_slice(&r.z);
        }
        d
    }

    /// Builds a view directly; `l` defaults to `x` when not supplied.
    pub fn new(x: Vec<f64>, delta: Vec<CensoringCode>, z: Vec<f64>, p: usize, l: Option<Vec<f64>>) -> Result<Self> {
        let n = x.len();
        if delta.len() != n || z.len() != n * p {
            return Err(Error::Dimension(format!(
                "x has {n} rows, delta {} rows, z {} values for p={p}",
                delta.len(),
                z.len()
            )));
        }
        let l = match l {
            Some(l) if l.len() == n => l,
            Some(l) => return Err(Error::Dimension(format!("l has {} rows, expected {n}", l.len()))),
            None => x.clone(),
        };
        Ok(EventData { x, delta, l, z, p })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn zi(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }

    /// Rejects constant or collinear covariate columns.
    pub fn check_covariate_rank(&self) -> Result<()> {
        let n = self.len();
        let p = self.p;
        if p == 0 {
            return Ok(());
        }
        if n <= p {
            return Err(Error::InvalidData(format!("need more than p={p} subjects, got {n}")));
        }
        let mut mean = vec![0.0; p];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(self.zi(i)) {
                *m += v / n as f64;
            }
        }
        let mut gram = nalgebra::DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let zi = self.zi(i);
            for a in 0..p {
                for b in 0..p {
                    gram[(a, b)] += (zi[a] - mean[a]) * (zi[b] - mean[b]);
                }
            }
        }
        let scale = (0..p).map(|a| gram[(a, a)]).fold(0.0, f64::max);
        let eig = gram.symmetric_eigenvalues();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if scale <= 0.0 || min <= 1e-10 * scale {
            return Err(Error::InvalidData(
                "covariate matrix is rank deficient after centering (constant or collinear column)".into(),
            ));
        }
        Ok(())
    }
}

/// Column names for the cohort CSV layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub id: String,
    pub labeled: String,
    pub x: String,
    pub delta: String,
    pub l: String,
    pub u: String,
    pub x_star: String,
    pub delta_star: String,
    /// Covariate columns in order; `None` picks up `z1, z2, ...` from the header.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            labeled: "labeled".into(),
            x: "x".into(),
            delta: "delta".into(),
            l: "l".into(),
            u: "u".into(),
            x_star: "x_star".into(),
            delta_star: "delta_star".into(),
            covariates: None,
        }
    }
}

pub fn load_cohort(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Cohort> {
    read_cohort(File::open(path)?, schema)
}

pub fn save_cohort(path: impl AsRef<Path>, cohort: &Cohort) -> Result<()> {
    let mut f = File::create(path)?;
    write_cohort(&mut f, cohort)?;
    f.flush()?;
    Ok(())
}

/// Reads a cohort. Lines starting with `#` are skipped. Row numbers in errors
/// are file line numbers.
pub fn read_cohort<R: Read>(reader: R, schema: &CsvSchema) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_id = col(&schema.id)?;
    let c_lab = col(&schema.labeled)?;
    let c_x = col(&schema.x)?;
    let c_delta = col(&schema.delta)?;
    let c_l = col(&schema.l)?;
    let c_u = col(&schema.u)?;
    let c_xs = col(&schema.x_star)?;
    let c_ds = col(&schema.delta_star)?;
    let z_cols: Vec<(String, usize)> = match &schema.covariates {
        Some(names) => names.iter().map(|n| col(n).map(|c| (n.clone(), c))).collect::<Result<_>>()?,
        None => {
            let mut found: Vec<(usize, String, usize)> = headers
                .iter()
                .enumerate()
                .filter_map(|(c, h)| {
                    h.strip_prefix('z')
                        .and_then(|s| s.parse::<usize>().ok())
                        .map(|k| (k, h.to_string(), c))
                })
                .collect();
            found.sort();
            for (pos, (k, _, _)) in found.iter().enumerate() {
                if *k != pos + 1 {
                    return Err(Error::MissingColumn(format!("z{}", pos + 1)));
                }
            }
            found.into_iter().map(|(_, h, c)| (h, c)).collect()
        }
    };
    let p = z_cols.len();

    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize, name: &str| -> Result<f64> {
            field(c).parse::<f64>().map_err(|e| Error::Parse {
                row,
                column: name.to_string(),
                msg: format!("`{}`: {e}", field(c)),
            })
        };
        let code = |c: usize, name: &str| -> Result<CensoringCode> {
            field(c)
                .parse::<u8>()
                .ok()
                .and_then(CensoringCode::from_code)
                .ok_or_else(|| Error::Parse {
                    row,
                    column: name.to_string(),
                    msg: format!("`{}` is not a censoring code in {{1, 2, 3}}", field(c)),
                })
        };
        let labeled = match field(c_lab) {
            "1" | "true" | "TRUE" => true,
            "0" | "false" | "FALSE" => false,
            other => {
                return Err(Error::Parse {
                    row,
                    column: schema.labeled.clone(),
                    msg: format!("`{other}` is not 0/1"),
                })
            }
        };
        let outcome = if labeled {
            Some(Outcome { x: num(c_x, &schema.x)?, delta: code(c_delta, &schema.delta)? })
        } else {
            None
        };
        let z = z_cols.iter().map(|(name, c)| num(*c, name)).collect::<Result<Vec<_>>>()?;
        let r = SubjectRecord {
            id: field(c_id).to_string(),
            outcome,
            l: num(c_l, &schema.l)?,
            u: num(c_u, &schema.u)?,
            surrogate: Outcome { x: num(c_xs, &schema.x_star)?, delta: code(c_ds, &schema.delta_star)? },
            z,
        };
        r.validate().map_err(|msg| Error::InvalidRecord { row, msg })?;
        records.push(r);
    }
    Cohort::new(records, p)
}

/// Writes the default schema. Floats use the shortest representation that
/// parses back to the same bits.
pub fn write_cohort<W: Write>(writer: W, cohort: &Cohort) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["id", "labeled", "x", "delta", "l", "u", "x_star", "delta_star"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=cohort.p()).map(|j| format!("z{j}")));
    w.write_record(&header)?;
    for r in cohort.records() {
        let mut row = vec![r.id.clone(), if r.labeled() { "1" } else { "0" }.to_string()];
        match r.outcome {
            Some(o) => {
                row.push(o.x.to_string());
                row.push(o.delta.code().to_string());
            }
            None => {
                row.push(String::new());
                row.push(String::new());
            }
        }
        row.push(r.l.to_string());
        row.push(r.u.to_string());
        row.push(r.surrogate.x.to_string());
        row.push(r.surrogate.delta.code().to_string());
        row.extend(r.z.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
