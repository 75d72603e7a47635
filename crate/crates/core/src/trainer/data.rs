use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{QftError, Result};
use crate::network::reference::FpMlp;
use crate::network::ModelConfig;
use crate::tensor::Tensor;

/// Width of the teacher network's hidden layer.
const TEACHER_HIDDEN: usize = 32;
/// Mixed into the data seed so teacher weights differ from student init.
const TEACHER_SALT: u64 = 0x7eac_4e12_d00d_5eed;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(QftError::shape("Dataset", inputs.rows(), targets.rows()));
        }
        if inputs.rows() == 0 {
            return Err(QftError::Empty("dataset"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.cols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(rows),
            targets: self.targets.select_rows(rows),
        }
    }

    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.select(&order)
    }

    pub fn check_dims(&self, features: usize, targets: usize) -> Result<()> {
        if self.features() != features || self.target_dim() != targets {
            return Err(QftError::Config(format!(
                "dataset has {} features and {} targets, model expects {features} and {targets}",
                self.features(),
                self.target_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Teacher outputs scaled to unit RMS.
    Regression,
    /// One-hot argmax of the teacher outputs.
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub features: usize,
    pub targets: usize,
    pub rows: usize,
    /// Standard deviation of Gaussian noise added to regression targets.
    pub noise: f64,
}

impl SyntheticSpec {
    /// Parse `reg-F-T-nN[-sNOISE]` or `cls-F-C-nN`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || {
            QftError::InvalidArgument(format!(
                "bad synthetic dataset '{text}', expected reg-F-T-nN or cls-F-C-nN"
            ))
        };
        let parts: Vec<&str> = text.split('-').collect();
        let (kind, f, t, n, noise) = match parts[..] {
            [kind, f, t, n] => (kind, f, t, n, None),
            [kind, f, t, n, s] => (kind, f, t, n, Some(s)),
            _ => return Err(bad()),
        };
        let kind = match kind {
            "reg" => SyntheticKind::Regression,
            "cls" => SyntheticKind::Classification,
            _ => return Err(bad()),
        };
        let num = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(bad);
        let spec = Self {
            kind,
            features: num(f)?,
            targets: num(t)?,
            rows: num(n.strip_prefix('n').ok_or_else(bad)?)?,
            noise: match noise {
                None => 0.0,
                Some(s) => s
                    .strip_prefix('s')
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .ok_or_else(bad)?,
            },
        };
        if kind == SyntheticKind::Classification && (spec.targets < 2 || noise.is_some()) {
            return Err(bad());
        }
        Ok(spec)
    }
}

/// Inputs drawn from a standard normal; targets from a fixed random teacher.
pub fn synthetic(spec: SyntheticSpec, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..spec.rows * spec.features)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let x = Tensor::from_vec(spec.rows, spec.features, data)?;
    let teacher_cfg = ModelConfig::new(vec![spec.features, TEACHER_HIDDEN, spec.targets])
        .with_seed(seed ^ TEACHER_SALT);
    let teacher = FpMlp::<f64>::build(&teacher_cfg)?;
    let (y, _) = teacher.forward(&x)?;
    let targets = match spec.kind {
        SyntheticKind::Regression => {
            let rms = (y.sum_squares() / y.len() as f64).sqrt();
            let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
            let mut t = y.scale(scale);
            if spec.noise > 0.0 {
                for v in t.data_mut() {
                    *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            t
        }
        SyntheticKind::Classification => {
            let mut t = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let row = y.row(r);
                let best = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .unwrap_or(0);
                t.set(r, best, 1.0);
            }
            t
        }
    };
    Dataset::new(x.cast(), targets.cast())
}

/// Parse CSV text whose last `target_dim` columns are targets. Blank lines
/// and lines starting with `#` are skipped; a first row with no numeric
/// field is taken as a header.
pub fn parse_csv(text: &str, target_dim: usize) -> Result<Dataset> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut width = None;
    let mut seen_content = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let first = !seen_content;
        seen_content = true;
        if first && fields.iter().all(|f| f.parse::<f32>().is_err()) {
            continue;
        }
        let values = fields
            .iter()
            .map(|f| {
                f.parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| QftError::Parse {
                        line: line_no,
                        msg: format!("'{f}' is not a finite number"),
                    })
            })
            .collect::<Result<Vec<f32>>>()?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(QftError::Parse {
                    line: line_no,
                    msg: format!("expected {w} fields, found {}", values.len()),
                })
            }
            _ => {}
        }
        rows.push(values);
    }
    let width = width.ok_or(QftError::Empty("csv dataset"))?;
    if target_dim == 0 || width <= target_dim {
        return Err(QftError::Config(format!(
            "csv rows have {width} columns, need more than {target_dim} target columns"
        )));
    }
    let features = width - target_dim;
    let mut x = Vec::with_capacity(rows.len() * features);
    let mut t = Vec::with_capacity(rows.len() * target_dim);
    for row in &rows {
        x.extend_from_slice(&row[..features]);
        t.extend_from_slice(&row[features..]);
    }
    Dataset::new(
        Tensor::from_vec(rows.len(), features, x)?,
        Tensor::from_vec(rows.len(), target_dim, t)?,
    )
}

/// Load `source` (a CSV path or `synthetic:<spec>`), check it against the
/// model's input and output widths, and shuffle it with `seed`.
pub fn ingest_dataset(source: &str, features: usize, targets: usize, seed: u64) -> Result<Dataset> {
    let data = match source.strip_prefix("synthetic:") {
        Some(spec) => synthetic(SyntheticSpec::parse(spec)?, seed)?,
        None => parse_csv(&std::fs::read_to_string(Path::new(source))?, targets)?,
    };
    data.check_dims(features, targets)?;
    Ok(data.shuffled(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_regression_contract() {
        let d = ingest_dataset("synthetic:reg-8-1-n1024", 8, 1, 5).unwrap();
        assert_eq!((d.len(), d.features(), d.target_dim()), (1024, 8, 1));
        let rms = (d.targets.sum_squares() as f64 / 1024.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-3);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = ingest_dataset("synthetic:reg-4-2-n100", 4, 2, 9).unwrap();
        let b = ingest_dataset("synthetic:reg-4-2-n100", 4, 2, 9).unwrap();
        let c = ingest_dataset("synthetic:reg-4-2-n100", 4, 2, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_noise_perturbs_targets_only() {
        let clean = synthetic(SyntheticSpec::parse("reg-4-1-n2000").unwrap(), 3).unwrap();
        let noisy = synthetic(SyntheticSpec::parse("reg-4-1-n2000-s0.1").unwrap(), 3).unwrap();
        assert_eq!(clean.inputs, noisy.inputs);
        let diff = noisy.targets.sub(&clean.targets).unwrap();
        let sd = (diff.sum_squares() as f64 / 2000.0).sqrt();
        assert!((sd - 0.1).abs() < 0.01, "{sd}");
    }

    #[test]
    fn synthetic_classification_is_one_hot() {
        let d = synthetic(SyntheticSpec::parse("cls-6-3-n50").unwrap(), 1).unwrap();
        for r in 0..50 {
            let row = d.targets.row(r);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().sum::<f32>(), 1.0);
        }
    }

    #[test]
    fn bad_synthetic_specs() {
        for s in ["reg-8-1", "reg-8-1-1024", "reg-8-1-n10-0.1", "reg-8-1-n10-s-1", "cls-4-2-n10-s0.1", "foo-8-1-n10", "reg-0-1-n10", "cls-4-1-n10", "reg-a-1-n10"] {
            assert!(SyntheticSpec::parse(s).is_err(), "{s}");
        }
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            ingest_dataset("synthetic:reg-8-1-n16", 4, 1, 0),
            Err(QftError::Config(_))
        ));
    }

    #[test]
    fn csv_with_header_and_comments() {
        let d = parse_csv("# data\nx1,x2,y\n1,2,3\n\n4, 5, 6\n", 1).unwrap();
        assert_eq!(d.inputs, Tensor::from_rows(&[&[1.0, 2.0], &[4.0, 5.0]]));
        assert_eq!(d.targets, Tensor::from_rows(&[&[3.0], &[6.0]]));
    }

    #[test]
    fn csv_errors_name_the_line() {
        match parse_csv("1,2,3\n4,x,6\n", 1) {
            Err(QftError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2,3\n4,5\n", 1) {
            Err(QftError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_csv("1,2,nan\n", 1).is_err());
        assert!(parse_csv("", 1).is_err());
        assert!(parse_csv("1,2\n", 2).is_err());
    }

    #[test]
    fn csv_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "0.5,1\n-0.5,0\n0.25,1\n").unwrap();
        let d = ingest_dataset(path.to_str().unwrap(), 1, 1, 3).unwrap();
        assert_eq!(d.len(), 3);
        let mut pairs: Vec<(f32, f32)> = (0..3).map(|r| (d.inputs.get(r, 0), d.targets.get(r, 0))).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(pairs, vec![(-0.5, 0.0), (0.25, 1.0), (0.5, 1.0)]);
        assert!(ingest_dataset("/nonexistent/file.csv", 1, 1, 0).is_err());
    }
}
