use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Result};
use crate::linalg::{Matrix, Vector};
use crate::network::{
    load_weights, predict, ActivationSpec, Dataset, Layer, LossKind, NetworkParams,
};

/// Target function of a synthetic 1-D regression set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    /// `tanh(4x − 2) − tanh(4x + 2)`, a negative bump centred at 0.
    Bump,
    /// Outputs of a stored single-input, single-output network.
    Teacher { weights: PathBuf },
    /// `Σ c_k x^k`.
    Polynomial { coeffs: Vec<f64> },
    /// `Σ a · g(w x + φ)` with `g` one of tanh, sin, cos.
    Terms { terms: Vec<Term> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wave {
    Tanh,
    Sin,
    Cos,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub wave: Wave,
    pub amplitude: f64,
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Term {
    pub fn eval(&self, x: f64) -> f64 {
        let z = self.frequency * x + self.phase;
        self.amplitude
            * match self.wave {
                Wave::Tanh => z.tanh(),
                Wave::Sin => z.sin(),
                Wave::Cos => z.cos(),
            }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    #[serde(default = "default_interval")]
    pub interval: [f64; 2],
    /// When set, the points are `(i − (n − 1)/2) · spacing` and `interval`
    /// is ignored, so grids of the same parity nest inside each other.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
    #[serde(default = "default_target")]
    pub target: Target,
}

fn default_interval() -> [f64; 2] {
    [-1.0, 1.0]
}

fn default_target() -> Target {
    Target::Bump
}

impl SyntheticSpec {
    pub fn bump(n: usize) -> Self {
        SyntheticSpec {
            n,
            interval: default_interval(),
            spacing: None,
            target: Target::Bump,
        }
    }
}

/// The two-neuron tanh network that computes the default bump target.
pub fn bump_teacher() -> NetworkParams {
    let l1 = Layer::new(
        Matrix::from_rows(&[vec![4.0], vec![4.0]]).expect("static shape"),
        Vector::from(vec![-2.0, 2.0]),
    );
    let l2 = Layer::new(
        Matrix::from_rows(&[vec![1.0, -1.0]]).expect("static shape"),
        Vector::zeros(1),
    );
    NetworkParams::new(ActivationSpec::tanh(), vec![l1, l2], None).expect("static network")
}

/// `n` equally spaced points covering the closed interval.
pub fn grid(n: usize, interval: [f64; 2]) -> Result<Matrix> {
    if n < 2 {
        return Err(ExperimentError::Config(format!(
            "a grid needs n ≥ 2, got {n}"
        )));
    }
    let [a, b] = interval;
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(ExperimentError::Config(format!("bad interval [{a}, {b}]")));
    }
    let step = (b - a) / (n - 1) as f64;
    Ok(Matrix::from_fn(n, 1, |r, _| a + step * r as f64))
}

/// `n` points with the given spacing, symmetric about 0.
pub fn centred_grid(n: usize, spacing: f64) -> Result<Matrix> {
    if n < 2 {
        return Err(ExperimentError::Config(format!(
            "a grid needs n ≥ 2, got {n}"
        )));
    }
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(ExperimentError::Config(format!("bad spacing {spacing}")));
    }
    let centre = (n - 1) as f64 / 2.0;
    Ok(Matrix::from_fn(n, 1, |r, _| (r as f64 - centre) * spacing))
}

pub fn gen_synthetic_1d(spec: &SyntheticSpec) -> Result<Dataset> {
    let x = match spec.spacing {
        Some(h) => centred_grid(spec.n, h)?,
        None => grid(spec.n, spec.interval)?,
    };
    let y = match &spec.target {
        Target::Bump => predict(&bump_teacher(), &x)?,
        Target::Teacher { weights } => {
            let teacher = load_weights(weights)?;
            if teacher.input_dim() != 1 {
                return Err(ExperimentError::Config(format!(
                    "teacher {} takes {} inputs, a 1-D dataset needs 1",
                    weights.display(),
                    teacher.input_dim()
                )));
            }
            predict(&teacher, &x)?
        }
        Target::Polynomial { coeffs } => Matrix::from_fn(spec.n, 1, |r, _| {
            coeffs.iter().rev().fold(0.0, |acc, c| acc * x[(r, 0)] + c)
        }),
        Target::Terms { terms } => Matrix::from_fn(spec.n, 1, |r, _| {
            terms.iter().map(|t| t.eval(x[(r, 0)])).sum()
        }),
    };
    Ok(Dataset::new(x, y, LossKind::Mse)?)
}

/// Regression set labelled by `teacher`.
pub fn teacher_dataset(teacher: &NetworkParams, inputs: Matrix) -> Result<Dataset> {
    let y = predict(teacher, &inputs)?;
    Ok(Dataset::new(inputs, y, LossKind::Mse)?)
}

fn data_err(path: &Path, line: Option<usize>, msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Data {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Iris-style CSV: a header row, numeric feature columns, and a class label
/// in the last column. Features are standardised per column (population
/// variance) and labels are numbered in sorted order.
pub fn load_iris(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(path, None, e.to_string()))?;
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| data_err(path, Some(line), e.to_string()))?;
        if rec.len() < 2 {
            return Err(data_err(
                path,
                Some(line),
                "expected features followed by a label",
            ));
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(data_err(
                path,
                Some(line),
                format!("{} fields, expected {w}", rec.len()),
            ));
        }
        let row = rec
            .iter()
            .take(w - 1)
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| data_err(path, Some(line), format!("`{s}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        features.push(row);
        names.push(rec[w - 1].to_string());
    }
    if features.is_empty() {
        return Err(data_err(path, None, "no data rows"));
    }
    let classes: BTreeMap<&str, usize> = {
        let mut uniq: Vec<&str> = names.iter().map(String::as_str).collect();
        uniq.sort_unstable();
        uniq.dedup();
        uniq.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
    };
    let labels: Vec<usize> = names.iter().map(|s| classes[s.as_str()]).collect();
    let mut x = Matrix::from_rows(&features).map_err(|e| data_err(path, None, e.to_string()))?;
    standardize(&mut x);
    Ok(Dataset::from_labels(x, &labels, classes.len())?)
}

/// Generic table: a header row, then numeric columns. Columns whose name
/// starts with `x` are inputs. Either columns starting with `y` give
/// regression targets (MSE), or one integer `label` column gives one-hot
/// targets over `classes` classes (cross-entropy; `max label + 1` when
/// `classes` is absent).
pub fn load_table(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(path, None, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| data_err(path, Some(1), e.to_string()))?
        .clone();
    let pick = |p: char| -> Vec<usize> {
        (0..header.len())
            .filter(|&i| header[i].starts_with(p))
            .collect()
    };
    let (xs, ys) = (pick('x'), pick('y'));
    let label = header.iter().position(|h| h == "label");
    if xs.is_empty() {
        return Err(data_err(
            path,
            Some(1),
            "no input columns (names starting with `x`)",
        ));
    }
    if ys.is_empty() == label.is_none() {
        return Err(data_err(
            path,
            Some(1),
            "need either `y…` target columns or a single `label` column",
        ));
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| data_err(path, Some(line), e.to_string()))?;
        let num = |c: usize| -> Result<f64> {
            let s = &rec[c];
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| data_err(path, Some(line), format!("`{s}` is not a number")))
        };
        inputs.push(xs.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?);
        match label {
            Some(c) => {
                let s = &rec[c];
                let l = s.parse::<usize>().map_err(|_| {
                    data_err(
                        path,
                        Some(line),
                        format!("label `{s}` is not a class index"),
                    )
                })?;
                labels.push(l);
            }
            None => targets.push(ys.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?),
        }
    }
    if inputs.is_empty() {
        return Err(data_err(path, None, "no data rows"));
    }
    let x = Matrix::from_rows(&inputs).map_err(|e| data_err(path, None, e.to_string()))?;
    if label.is_some() {
        let k = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        return Dataset::from_labels(x, &labels, k)
            .map_err(|e| data_err(path, None, e.to_string()));
    }
    let y = Matrix::from_rows(&targets).map_err(|e| data_err(path, None, e.to_string()))?;
    Ok(Dataset::new(x, y, LossKind::Mse)?)
}

fn standardize(x: &mut Matrix) {
    let n = x.rows() as f64;
    for c in 0..x.cols() {
        let col = x.column(c);
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in 0..x.rows() {
            x.row_mut(r)[c] = (col[r] - mean) / sd;
        }
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn read_idx(path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(data_err(path, None, "truncated IDX header"));
    }
    let found = be_u32(&bytes, 0);
    if found != magic {
        return Err(data_err(
            path,
            None,
            format!("magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let shape: Vec<usize> = (0..dims)
        .map(|d| be_u32(&bytes, 4 + 4 * d) as usize)
        .collect();
    let need: usize = shape.iter().product();
    if bytes.len() - header < need {
        return Err(data_err(
            path,
            None,
            format!(
                "truncated IDX body: {} bytes for {need} entries",
                bytes.len() - header
            ),
        ));
    }
    Ok((shape, bytes[header..header + need].to_vec()))
}

fn mnist_split(dir: &Path, prefix: &str, take: usize) -> Result<Dataset> {
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lab_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (shape, pixels) = read_idx(&img_path, IDX_IMAGES, 3)?;
    let (lshape, labels) = read_idx(&lab_path, IDX_LABELS, 1)?;
    if shape[0] != lshape[0] {
        return Err(data_err(
            &lab_path,
            None,
            format!("{} labels for {} images", lshape[0], shape[0]),
        ));
    }
    if take > shape[0] {
        return Err(data_err(
            &img_path,
            None,
            format!("asked for {take} samples, file has {}", shape[0]),
        ));
    }
    let d = shape[1] * shape[2];
    let x = Matrix::from_fn(take, d, |r, c| pixels[r * d + c] as f64 / 255.0);
    let y: Vec<usize> = labels[..take].iter().map(|&l| l as usize).collect();
    if let Some(bad) = y.iter().find(|&&l| l > 9) {
        return Err(data_err(
            &lab_path,
            None,
            format!("label {bad} outside 0..=9"),
        ));
    }
    Ok(Dataset::from_labels(x, &y, 10)?)
}

/// First `n_train` training and `n_test` test samples from a directory with
/// the four standard IDX files. Pixels are scaled to `[0, 1]`.
pub fn load_mnist_subset(dir: &Path, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    Ok((
        mnist_split(dir, "train", n_train)?,
        mnist_split(dir, "t10k", n_test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn table_regression_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        fs::write(&p, "x1,x2,y\n0,1,2.5\n1,0,-1\n").unwrap();
        let d = load_table(&p, None).unwrap();
        assert_eq!((d.len(), d.input_dim(), d.output_dim()), (2, 2, 1));
        assert_eq!(d.targets()[(0, 0)], 2.5);
        assert_eq!(d.loss_kind(), LossKind::Mse);
        fs::write(&p, "x,label\n0.5,2\n0.1,0\n").unwrap();
        let d = load_table(&p, Some(4)).unwrap();
        assert_eq!((d.output_dim(), d.labels()), (4, vec![2, 0]));
        assert_eq!(d.loss_kind(), LossKind::CrossEntropy);
        fs::write(&p, "x,y\n0.5,1\n0.1,oops\n").unwrap();
        let err = load_table(&p, None).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(load_table(&p, None).is_err());
    }

    fn repo_data(rel: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../data")
            .join(rel)
    }

    #[test]
    fn grid_is_uniform() {
        let d = gen_synthetic_1d(&SyntheticSpec::bump(70)).unwrap();
        let x = d.inputs().column(0);
        let h = x[1] - x[0];
        for w in x.windows(2) {
            assert!(((w[1] - w[0]) - h).abs() <= 1e-12);
        }
        assert_eq!((x[0], x[69]), (-1.0, 1.0));
        assert!(gen_synthetic_1d(&SyntheticSpec::bump(1)).is_err());
    }

    #[test]
    fn centred_grids_nest() {
        let h = 2.0 / 69.0;
        let spec = |n| SyntheticSpec {
            spacing: Some(h),
            ..SyntheticSpec::bump(n)
        };
        let small = gen_synthetic_1d(&spec(70)).unwrap();
        let large = gen_synthetic_1d(&spec(100)).unwrap();
        // the 70-point grid sits at rows 15..85 of the 100-point one, bit for bit
        for i in 0..70 {
            assert_eq!(small.inputs()[(i, 0)], large.inputs()[(i + 15, 0)]);
            assert_eq!(small.targets()[(i, 0)], large.targets()[(i + 15, 0)]);
        }
        let x = small.inputs().column(0);
        assert!((x[0] + 1.0).abs() < 1e-15 && (x[69] - 1.0).abs() < 1e-15);
        assert!(centred_grid(5, 0.0).is_err());
    }

    #[test]
    fn terms_target_evaluates_each_wave() {
        let json = r#"{"n": 5, "target": {"kind": "terms", "terms": [
            {"wave": "tanh", "amplitude": 1.0, "frequency": 2.0},
            {"wave": "cos", "amplitude": 0.5, "frequency": 25.0},
            {"wave": "sin", "amplitude": -1.0, "frequency": 1.0, "phase": 0.5}]}}"#;
        let spec: SyntheticSpec = serde_json::from_str(json).unwrap();
        let d = gen_synthetic_1d(&spec).unwrap();
        for i in 0..5 {
            let x = d.inputs()[(i, 0)];
            let want = (2.0 * x).tanh() + 0.5 * (25.0 * x).cos() - (x + 0.5).sin();
            assert!((d.targets()[(i, 0)] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn bump_matches_closed_form() {
        let d = gen_synthetic_1d(&SyntheticSpec::bump(11)).unwrap();
        for i in 0..11 {
            let x = d.inputs()[(i, 0)];
            let want = (4.0 * x - 2.0).tanh() - (4.0 * x + 2.0).tanh();
            assert!((d.targets()[(i, 0)] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn polynomial_and_teacher_targets() {
        let spec = SyntheticSpec {
            n: 3,
            interval: [0.0, 2.0],
            spacing: None,
            target: Target::Polynomial {
                coeffs: vec![1.0, 0.0, 2.0],
            },
        };
        let d = gen_synthetic_1d(&spec).unwrap();
        assert_eq!(d.targets().as_slice(), &[1.0, 3.0, 9.0]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        crate::network::save_weights(&bump_teacher(), &path).unwrap();
        let spec = SyntheticSpec {
            n: 21,
            interval: [-1.0, 1.0],
            spacing: None,
            target: Target::Teacher { weights: path },
        };
        let d = gen_synthetic_1d(&spec).unwrap();
        assert_eq!(d, gen_synthetic_1d(&SyntheticSpec::bump(21)).unwrap());
        assert_eq!(crate::network::loss(&bump_teacher(), &d).unwrap(), 0.0);
    }

    #[test]
    fn iris_loads_and_standardises() {
        let d = load_iris(&repo_data("iris.csv")).unwrap();
        assert_eq!((d.len(), d.input_dim(), d.output_dim()), (150, 4, 3));
        for c in 0..4 {
            let col = d.inputs().column(c);
            let m = col.iter().sum::<f64>() / 150.0;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 150.0;
            assert!(m.abs() <= 1e-10 && (v - 1.0).abs() < 1e-10);
        }
        let labels = d.labels();
        for k in 0..3 {
            assert_eq!(labels.iter().filter(|&&l| l == k).count(), 50);
        }
    }

    #[test]
    fn iris_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        fs::write(&empty, "").unwrap();
        assert!(load_iris(&empty).is_err());
        let bad = dir.path().join("bad.csv");
        let mut f = fs::File::create(&bad).unwrap();
        writeln!(f, "a,b,label\n1.0,2.0,x\n1.0,oops,y").unwrap();
        let err = load_iris(&bad).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("oops"), "{err}");
    }

    /// Independent reader: walks the label file byte by byte.
    fn label_histogram(path: &Path, take: usize) -> [usize; 10] {
        let bytes = fs::read(path).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 1]);
        let count = ((bytes[4] as usize) << 24)
            | ((bytes[5] as usize) << 16)
            | ((bytes[6] as usize) << 8)
            | bytes[7] as usize;
        assert!(take <= count);
        let mut h = [0usize; 10];
        for b in &bytes[8..8 + take] {
            h[*b as usize] += 1;
        }
        h
    }

    #[test]
    fn mnist_subset_shapes_and_labels() {
        let dir = repo_data("mnist-subset");
        let (train, test) = load_mnist_subset(&dir, 1000, 1000).unwrap();
        assert_eq!(train.inputs().shape(), (1000, 784));
        assert_eq!(train.targets().shape(), (1000, 10));
        assert_eq!(test.len(), 1000);
        assert!(train
            .inputs()
            .as_slice()
            .iter()
            .all(|&p| (0.0..=1.0).contains(&p)));
        let mut h = [0usize; 10];
        for l in train.labels() {
            h[l] += 1;
        }
        assert_eq!(
            h,
            label_histogram(&dir.join("train-labels-idx1-ubyte"), 1000)
        );
    }

    #[test]
    fn mnist_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let src = repo_data("mnist-subset");
        for name in [
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "t10k-labels-idx1-ubyte",
        ] {
            fs::copy(src.join(name), dir.path().join(name)).unwrap();
        }
        let mut swapped = fs::read(src.join("t10k-labels-idx1-ubyte")).unwrap();
        swapped.extend(std::iter::repeat_n(0, 784 * 1000));
        fs::write(dir.path().join("t10k-images-idx3-ubyte"), &swapped).unwrap();
        let err = load_mnist_subset(dir.path(), 10, 10)
            .unwrap_err()
            .to_string();
        assert!(err.contains("magic"), "{err}");

        let img = fs::read(src.join("t10k-images-idx3-ubyte")).unwrap();
        fs::write(dir.path().join("t10k-images-idx3-ubyte"), &img[..5000]).unwrap();
        let err = load_mnist_subset(dir.path(), 10, 10)
            .unwrap_err()
            .to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
