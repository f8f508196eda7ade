//! Sparse longitudinal samples on a manifold, their JSON-lines form, and
//! the simulation designs.

mod simulate;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{Geometry, Manifold, Point};

pub use simulate::{simulate, snr_calibrate, Design, NoiseMode, SimSpec, SimTruth, TruthGrid};

/// How observation weights λᵢ (mean) and νᵢ (covariance) are spread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightScheme {
    /// Every observation (or within-subject pair) counts equally.
    #[default]
    #[serde(rename = "obs-equal", alias = "obs")]
    ObsEqual,
    /// Every subject counts equally regardless of its number of observations.
    #[serde(rename = "subject-equal", alias = "subject")]
    SubjectEqual,
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "obs" | "obs-equal" => Ok(WeightScheme::ObsEqual),
            "subject" | "subject-equal" => Ok(WeightScheme::SubjectEqual),
            _ => Err(Error::Invalid(format!("unknown weight scheme `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub points: Vec<Point>,
}

impl Subject {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// n subjects observed at mᵢ scattered times each.
#[derive(Clone, Debug)]
pub struct SparseDataset {
    geometry: Geometry,
    domain: [f64; 2],
    subjects: Vec<Subject>,
    scheme: WeightScheme,
    resorted: usize,
    lambda: Vec<f64>,
    nu: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    geometry: Geometry,
    #[serde(default = "unit_domain")]
    domain: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<WeightScheme>,
}

fn unit_domain() -> [f64; 2] {
    [0.0, 1.0]
}

impl SparseDataset {
    /// Validates every subject. Unsorted times are sorted (points follow)
    /// and counted in [`SparseDataset::resorted_count`].
    pub fn new(
        geometry: Geometry,
        domain: [f64; 2],
        subjects: Vec<Subject>,
        scheme: WeightScheme,
    ) -> Result<Self> {
        if !(domain[0] < domain[1]) || !domain.iter().all(|x| x.is_finite()) {
            return Err(Error::Invalid(format!("bad domain {domain:?}")));
        }
        if subjects.is_empty() {
            return Err(Error::Invalid("dataset has no subjects".into()));
        }
        let mut resorted = 0;
        let mut out = Vec::with_capacity(subjects.len());
        for mut s in subjects {
            let bad = |reason: String| Error::Subject {
                subject: s.id.clone(),
                reason,
            };
            if s.times.len() != s.points.len() {
                return Err(bad(format!(
                    "{} times but {} points",
                    s.times.len(),
                    s.points.len()
                )));
            }
            if s.times.is_empty() {
                return Err(bad("no observations".into()));
            }
            if let Some(t) = s
                .times
                .iter()
                .find(|t| !t.is_finite() || **t < domain[0] || **t > domain[1])
            {
                return Err(bad(format!("time {t} outside domain {domain:?}")));
            }
            for (j, p) in s.points.iter().enumerate() {
                geometry
                    .validate_point(p)
                    .map_err(|e| bad(format!("observation {j}: {e}")))?;
            }
            if s.times.windows(2).any(|w| w[0] > w[1]) {
                let mut idx: Vec<usize> = (0..s.times.len()).collect();
                idx.sort_by(|&a, &b| s.times[a].total_cmp(&s.times[b]));
                s.times = idx.iter().map(|&k| s.times[k]).collect();
                s.points = idx.iter().map(|&k| s.points[k].clone()).collect();
                resorted += 1;
            }
            out.push(s);
        }
        let (lambda, nu) = weights(&out, scheme);
        Ok(SparseDataset {
            geometry,
            domain,
            subjects: out,
            scheme,
            resorted,
            lambda,
            nu,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn domain(&self) -> [f64; 2] {
        self.domain
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    /// Number of subjects whose times had to be sorted on ingest.
    pub fn resorted_count(&self) -> usize {
        self.resorted
    }

    pub fn total_obs(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    /// Subjects with at least two observations; only these enter covariance
    /// estimation.
    pub fn covariance_subjects(&self) -> usize {
        self.subjects.iter().filter(|s| s.len() >= 2).count()
    }

    /// Mean weight λᵢ, with ∑λᵢmᵢ = 1.
    pub fn lambda(&self, i: usize) -> f64 {
        self.lambda[i]
    }

    /// Covariance weight νᵢ, with ∑νᵢmᵢ(mᵢ−1) = 1; zero when mᵢ < 2.
    pub fn nu(&self, i: usize) -> f64 {
        self.nu[i]
    }

    pub fn with_scheme(&self, scheme: WeightScheme) -> SparseDataset {
        let (lambda, nu) = weights(&self.subjects, scheme);
        SparseDataset {
            scheme,
            lambda,
            nu,
            ..self.clone()
        }
    }

    /// The dataset restricted to the given subjects, with weights recomputed.
    pub fn subset(&self, idx: &[usize]) -> Result<SparseDataset> {
        let subjects: Vec<Subject> = idx.iter().map(|&i| self.subjects[i].clone()).collect();
        if subjects.is_empty() {
            return Err(Error::Invalid("empty subset".into()));
        }
        let (lambda, nu) = weights(&subjects, self.scheme);
        Ok(SparseDataset {
            geometry: self.geometry.clone(),
            domain: self.domain,
            subjects,
            scheme: self.scheme,
            resorted: 0,
            lambda,
            nu,
        })
    }

    /// Median gap between consecutive observation times within subjects.
    pub fn median_gap(&self) -> Option<f64> {
        let mut gaps: Vec<f64> = self
            .subjects
            .iter()
            .flat_map(|s| s.times.windows(2).map(|w| w[1] - w[0]))
            .filter(|g| *g > 0.0)
            .collect();
        if gaps.is_empty() {
            return None;
        }
        gaps.sort_by(f64::total_cmp);
        let k = gaps.len();
        Some(if k % 2 == 1 {
            gaps[k / 2]
        } else {
            0.5 * (gaps[k / 2 - 1] + gaps[k / 2])
        })
    }

    /// Writes the header line and one line per subject.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            geometry: self.geometry.clone(),
            domain: self.domain,
            weights: Some(self.scheme),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for s in &self.subjects {
            serde_json::to_writer(&mut w, s)?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads the JSON-lines form. Blank lines are skipped. The weight scheme
    /// in the header is used unless `scheme` overrides it.
    pub fn read_jsonl<R: BufRead>(r: R, scheme: Option<WeightScheme>) -> Result<Self> {
        let mut lines = r
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Invalid("empty dataset stream".into()))?;
        let header: Header = serde_json::from_str(&first?)
            .map_err(|e| Error::Invalid(format!("bad header record: {e}")))?;
        let mut subjects = Vec::new();
        for (k, line) in lines {
            let line = line?;
            let v: Value = serde_json::from_str(&line)?;
            let id = v
                .get("id")
                .map(|x| match x {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .unwrap_or_else(|| format!("line{}", k + 1));
            let s: Subject = serde_json::from_value(normalize_id(v)).map_err(|e| Error::Subject {
                subject: id,
                reason: format!("malformed record: {e}"),
            })?;
            subjects.push(s);
        }
        let scheme = scheme.or(header.weights).unwrap_or_default();
        SparseDataset::new(header.geometry, header.domain, subjects, scheme)
    }

    pub fn read_path(path: &std::path::Path, scheme: Option<WeightScheme>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f), scheme)
    }

    pub fn write_path(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Numeric ids are accepted and stored as strings.
fn normalize_id(mut v: Value) -> Value {
    if let Some(id) = v.get_mut("id") {
        if !id.is_string() {
            *id = Value::String(id.to_string());
        }
    }
    v
}

fn weights(subjects: &[Subject], scheme: WeightScheme) -> (Vec<f64>, Vec<f64>) {
    let n = subjects.len() as f64;
    let total: usize = subjects.iter().map(Subject::len).sum();
    let pairs: usize = subjects.iter().map(|s| s.len() * s.len().saturating_sub(1)).sum();
    let n_cov = subjects.iter().filter(|s| s.len() >= 2).count() as f64;
    let lambda = subjects
        .iter()
        .map(|s| match scheme {
            WeightScheme::ObsEqual => 1.0 / total as f64,
            WeightScheme::SubjectEqual => 1.0 / (n * s.len() as f64),
        })
        .collect();
    let nu = subjects
        .iter()
        .map(|s| {
            let m = s.len();
            if m < 2 {
                return 0.0;
            }
            match scheme {
                WeightScheme::ObsEqual => 1.0 / pairs as f64,
                WeightScheme::SubjectEqual => 1.0 / (n_cov * (m * (m - 1)) as f64),
            }
        })
        .collect();
    (lambda, nu)
}
