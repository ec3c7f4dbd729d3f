use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Time-ordered frames of `N` feature points in `D` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T> {
    frames: Vec<Tensor<T>>,
    dim: usize,
    dt: f64,
    labels: Vec<String>,
    units_per_meter: f64,
}

/// JSON sidecar describing a sequence CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub dt: f64,
    pub dim: usize,
    pub labels: Vec<String>,
    pub units: String,
    pub units_per_meter: f64,
}

/// Column layout expected by [`FeatureSequence::read_csv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvLayout {
    pub dim: usize,
    pub time_column: bool,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(frames: Vec<Tensor<T>>, dt: f64, labels: Vec<String>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidParameter("sequence needs at least one frame".into()))?;
        let (n, dim) = first.shape();
        if !(2..=3).contains(&dim) {
            return Err(Error::InvalidParameter(format!(
                "feature dimension must be 2 or 3, got {dim}"
            )));
        }
        if frames.len() < 2 {
            return Err(Error::InvalidParameter(
                "sequence needs at least 2 frames for velocities".into(),
            ));
        }
        if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != (n, dim)) {
            return Err(Error::Dimension {
                expected: format!("{n}x{dim} in every frame"),
                got: format!("{:?} at frame {t}", f.shape()),
            });
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
        }
        if labels.len() != n {
            return Err(Error::Dimension {
                expected: format!("{n} labels"),
                got: labels.len().to_string(),
            });
        }
        Ok(Self {
            frames,
            dim,
            dt,
            labels,
            units_per_meter: 1.0,
        })
    }

    pub fn with_units_per_meter(mut self, units_per_meter: f64) -> Self {
        self.units_per_meter = units_per_meter;
        self
    }

    pub fn frames(&self) -> &[Tensor<T>] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Tensor<T> {
        &self.frames[t]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.frames[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Scene units per meter (1 for meters, 10 for decimeters).
    pub fn units_per_meter(&self) -> f64 {
        self.units_per_meter
    }

    pub fn meta(&self) -> SequenceMeta {
        SequenceMeta {
            dt: self.dt,
            dim: self.dim,
            labels: self.labels.clone(),
            units: unit_name(self.units_per_meter),
            units_per_meter: self.units_per_meter,
        }
    }

    /// `V(t) = X(t) - X(t-1)`; entry 0 is `None`.
    pub fn velocities(&self) -> Vec<Option<Tensor<T>>> {
        let mut out = Vec::with_capacity(self.frames.len());
        out.push(None);
        for w in self.frames.windows(2) {
            let data = w[1].data().iter().zip(w[0].data()).map(|(&a, &b)| a - b).collect();
            out.push(Some(Tensor::new(w[1].rows(), w[1].cols(), data).unwrap()));
        }
        out
    }

    /// Reorders features so that new feature `k` is old feature `permutation[k]`.
    pub fn permute_features(&self, permutation: &[usize]) -> Result<Self> {
        let n = self.n_features();
        validate_permutation(permutation, n)?;
        let frames = self
            .frames
            .iter()
            .map(|f| Tensor::from_fn(n, self.dim, |r, c| f.get(permutation[r], c)))
            .collect();
        Ok(Self {
            frames,
            dim: self.dim,
            dt: self.dt,
            labels: permutation.iter().map(|&i| self.labels[i].clone()).collect(),
            units_per_meter: self.units_per_meter,
        })
    }

    pub fn map_frames(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            frames: self.frames.iter().map(f).collect(),
            dim: self.dim,
            dt: self.dt,
            labels: self.labels.clone(),
            units_per_meter: self.units_per_meter,
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureSequence<U> {
        FeatureSequence {
            frames: self.frames.iter().map(Tensor::cast).collect(),
            dim: self.dim,
            dt: self.dt,
            labels: self.labels.clone(),
            units_per_meter: self.units_per_meter,
        }
    }

    /// Writes `t,<label>_x,<label>_y[,<label>_z]...` rows with shortest
    /// round-trip float formatting.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let axes = ["x", "y", "z"];
        let mut header = vec!["t".to_string()];
        for l in &self.labels {
            for a in &axes[..self.dim] {
                header.push(format!("{l}_{a}"));
            }
        }
        wr.write_record(&header).map_err(csv_err)?;
        for (t, f) in self.frames.iter().enumerate() {
            let mut rec = vec![(t as f64 * self.dt).to_string()];
            rec.extend(f.data().iter().map(|v| v.to_f64_lossy().to_string()));
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read, layout: CsvLayout, dt: Option<f64>) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        let offset = usize::from(layout.time_column);
        let value_cols = header.len().saturating_sub(offset);
        if layout.dim == 0 || value_cols == 0 || value_cols % layout.dim != 0 {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "{value_cols} coordinate columns is not a multiple of dimension {}",
                    layout.dim
                ),
            });
        }
        let n = value_cols / layout.dim;
        let labels: Vec<String> = (0..n)
            .map(|i| {
                let h = &header[offset + i * layout.dim];
                h.rsplit_once('_').map_or(h, |(l, _)| l).to_string()
            })
            .collect();
        let mut frames = Vec::new();
        let mut times = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != header.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("row has {} cells, header has {}", rec.len(), header.len()),
                });
            }
            let mut values = Vec::with_capacity(value_cols);
            for (c, cell) in rec.iter().enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("non-numeric cell `{cell}` in column {}", c + 1),
                })?;
                if c < offset {
                    times.push(v);
                } else {
                    values.push(T::lit(v));
                }
            }
            frames.push(Tensor::new(n, layout.dim, values)?);
        }
        let dt = match dt {
            Some(dt) => dt,
            None if times.len() >= 2 => times[1] - times[0],
            None => {
                return Err(Error::Parse {
                    line: 2,
                    message: "cannot infer dt without a time column and at least 2 rows".into(),
                })
            }
        };
        Self::new(frames, dt, labels)
    }

    /// Loads a sequence CSV; a sibling `<file>.json` sidecar, when present,
    /// supplies `dt`, labels and units.
    pub fn load_csv(path: impl AsRef<Path>, layout: CsvLayout) -> Result<Self> {
        let path = path.as_ref();
        let sidecar = path.with_extension("json");
        let meta: Option<SequenceMeta> = if sidecar.exists() {
            Some(serde_json::from_slice(&std::fs::read(&sidecar)?)?)
        } else {
            None
        };
        let file = std::fs::File::open(path)?;
        let mut seq = Self::read_csv(std::io::BufReader::new(file), layout, meta.as_ref().map(|m| m.dt))?;
        if let Some(m) = meta {
            if m.labels.len() == seq.n_features() {
                seq.labels = m.labels;
            }
            seq.units_per_meter = m.units_per_meter;
        }
        Ok(seq)
    }
}

fn unit_name(units_per_meter: f64) -> String {
    match units_per_meter {
        1.0 => "m".into(),
        10.0 => "dm".into(),
        100.0 => "cm".into(),
        u => format!("1/{u} m"),
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

pub fn validate_permutation(permutation: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if permutation.len() != n {
        return Err(Error::InvalidParameter(format!(
            "permutation has {} entries for {n} features",
            permutation.len()
        )));
    }
    for &p in permutation {
        if p >= n || seen[p] {
            return Err(Error::InvalidParameter(format!(
                "{permutation:?} is not a bijection on 0..{n}"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Inverse of a permutation: `inverse[permutation[k]] = k`.
pub fn invert_permutation(permutation: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; permutation.len()];
    for (k, &p) in permutation.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FeatureSequence<f64> {
        let frames = (0..3)
            .map(|t| Tensor::new(2, 2, vec![t as f64 * 0.1, 1.0 / 3.0, -2.5e-7, t as f64]).unwrap())
            .collect();
        FeatureSequence::new(frames, 0.01, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let seq = small();
        let mut buf = Vec::new();
        seq.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,a_x,a_y,b_x,b_y\n"));
        let back = FeatureSequence::<f64>::read_csv(
            buf.as_slice(),
            CsvLayout {
                dim: 2,
                time_column: true,
            },
            None,
        )
        .unwrap();
        assert_eq!(back.frames(), seq.frames());
        assert_eq!(back.labels(), seq.labels());
    }

    #[test]
    fn ragged_row_names_line() {
        let text = "t,a_x,a_y\n0,1,2\n0.1,3\n";
        let err = FeatureSequence::<f64>::read_csv(
            text.as_bytes(),
            CsvLayout {
                dim: 2,
                time_column: true,
            },
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn non_numeric_and_column_mismatch() {
        let layout = CsvLayout {
            dim: 2,
            time_column: true,
        };
        let err = FeatureSequence::<f64>::read_csv("t,a_x,a_y\n0,1,x\n0.1,1,2\n".as_bytes(), layout, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = FeatureSequence::<f64>::read_csv("t,a_x,a_y,b_x\n0,1,2,3\n".as_bytes(), layout, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn velocities_of_constant_and_linear_motion() {
        let constant =
            FeatureSequence::new(vec![Tensor::<f64>::filled(3, 2, 0.7); 4], 0.5, vec!["f".into(); 3]).unwrap();
        let v = constant.velocities();
        assert!(v[0].is_none());
        assert!(v[1..]
            .iter()
            .all(|v| v.as_ref().unwrap().data().iter().all(|x| *x == 0.0)));

        let frames = (0..5).map(|t| Tensor::row(vec![t as f64, 0.0])).collect();
        let linear = FeatureSequence::new(frames, 1.0, vec!["p".into()]).unwrap();
        for v in linear.velocities().into_iter().skip(1) {
            assert_eq!(v.unwrap().data(), &[1.0, 0.0]);
        }
    }

    #[test]
    fn single_frame_is_rejected() {
        assert!(FeatureSequence::new(vec![Tensor::<f64>::zeros(1, 2)], 0.1, vec!["a".into()]).is_err());
    }

    #[test]
    fn permutation_rules() {
        let seq = small();
        assert_eq!(seq.permute_features(&[0, 1]).unwrap(), seq);
        let swapped = seq.permute_features(&[1, 0]).unwrap();
        assert_eq!(swapped.labels(), &["b".to_string(), "a".to_string()]);
        assert_eq!(swapped.permute_features(&[1, 0]).unwrap(), seq);
        assert!(seq.permute_features(&[0, 0]).is_err());
        assert!(seq.permute_features(&[0]).is_err());
        assert_eq!(invert_permutation(&[2, 0, 1]), vec![1, 2, 0]);
    }
}
