//! Series containers, CSV ingestion, differencing and chronological splits.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A multivariate series indexed by (time, feature).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    values: Array2<f64>,
    feature_names: Vec<String>,
    time_index: Vec<i64>,
}

impl SeriesFrame {
    /// Builds a frame with ticks `0..T`.
    pub fn new(values: Array2<f64>, feature_names: Vec<String>) -> Result<Self> {
        let time_index = (0..values.nrows() as i64).collect();
        Self::with_time_index(values, feature_names, time_index)
    }

    pub fn with_time_index(
        values: Array2<f64>,
        feature_names: Vec<String>,
        time_index: Vec<i64>,
    ) -> Result<Self> {
        if feature_names.len() != values.ncols() {
            return Err(Error::Structure(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                values.ncols()
            )));
        }
        if time_index.len() != values.nrows() {
            return Err(Error::Structure(format!(
                "time index has {} ticks for {} rows",
                time_index.len(),
                values.nrows()
            )));
        }
        if time_index.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Structure(
                "time index must be strictly increasing".into(),
            ));
        }
        if let Some(((row, col), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Parse {
                row,
                column: col,
                message: format!("non-finite value {v}"),
            });
        }
        Ok(Self {
            values,
            feature_names,
            time_index,
        })
    }

    /// Single-feature frame from a slice.
    pub fn univariate(name: &str, values: &[f64]) -> Result<Self> {
        let arr = Array2::from_shape_vec((values.len(), 1), values.to_vec())
            .map_err(|e| Error::Structure(e.to_string()))?;
        Self::new(arr, vec![name.to_string()])
    }

    /// Frame with generated names `f0..f{k-1}`.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let names = generated_names(values.ncols());
        Self::new(values, names)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn time_index(&self) -> &[i64] {
        &self.time_index
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, feature: usize) -> ArrayView1<'_, f64> {
        self.values.column(feature)
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Rows `[start, end)` as a new frame, keeping their ticks.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            values: self.values.slice(s![start..end, ..]).to_owned(),
            feature_names: self.feature_names.clone(),
            time_index: self.time_index[start..end].to_vec(),
        }
    }

    /// Same shape, names and ticks with new values.
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(Error::Argument(format!(
                "shape {:?} does not match frame shape {:?}",
                values.dim(),
                self.values.dim()
            )));
        }
        Self::with_time_index(values, self.feature_names.clone(), self.time_index.clone())
    }

    /// Per-feature mean and population variance.
    pub fn moments(&self) -> Vec<(f64, f64)> {
        self.values
            .axis_iter(Axis(1))
            .map(|col| population_moments(col.iter().copied()))
            .collect()
    }

    /// Stacks frames vertically; all must share feature names.
    pub fn concat(frames: &[&SeriesFrame]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        if frames.iter().any(|f| f.feature_names != first.feature_names) {
            return Err(Error::Argument("feature names differ".into()));
        }
        let views: Vec<_> = frames.iter().map(|f| f.values.view()).collect();
        let values = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Structure(e.to_string()))?;
        let time_index = frames
            .iter()
            .flat_map(|f| f.time_index.iter().copied())
            .collect();
        Self::with_time_index(values, first.feature_names.clone(), time_index)
    }

    /// Lag-`order` differences `x_t - x_{t-order}`.
    pub fn difference(&self, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Argument("difference order must be positive".into()));
        }
        let t = self.len();
        if order >= t {
            return Err(Error::Argument(format!(
                "difference order {order} needs more than {t} observations"
            )));
        }
        let diff = &self.values.slice(s![order.., ..]) - &self.values.slice(s![..t - order, ..]);
        Self::with_time_index(
            diff,
            self.feature_names.clone(),
            self.time_index[order..].to_vec(),
        )
    }

    /// Chronological train/validation/test split.
    ///
    /// Train gets `floor(T * train_fraction)` rows, validation
    /// `floor(T * val_fraction)`, and test the remainder. A zero validation
    /// fraction yields an empty validation frame.
    pub fn split(&self, spec: &SplitSpec) -> Result<(Self, Self, Self)> {
        spec.validate()?;
        let (n_train, n_val, n_test) = spec.segment_lengths(self.len());
        if n_train == 0 || n_test == 0 || (spec.val_fraction > 0.0 && n_val == 0) {
            return Err(Error::Argument(format!(
                "split of {} rows gives an empty segment ({n_train}/{n_val}/{n_test})",
                self.len()
            )));
        }
        if spec.context_length + spec.horizon > n_train {
            return Err(Error::Argument(format!(
                "context {} + horizon {} exceeds training length {n_train}",
                spec.context_length, spec.horizon
            )));
        }
        Ok((
            self.slice_rows(0, n_train),
            self.slice_rows(n_train, n_train + n_val),
            self.slice_rows(n_train + n_val, self.len()),
        ))
    }

    /// Sliding (context, target) pairs with contexts starting at multiples of
    /// `stride`.
    pub fn windows(&self, context_length: usize, horizon: usize, stride: usize) -> Result<Vec<Window>> {
        let starts = window_starts(self.len(), context_length, horizon, stride)?;
        Ok(starts
            .map(|start| Window {
                start,
                context: self
                    .values
                    .slice(s![start..start + context_length, ..])
                    .to_owned(),
                target: self
                    .values
                    .slice(s![start + context_length..start + context_length + horizon, ..])
                    .to_owned(),
            })
            .collect())
    }

    pub fn read_csv<R: Read>(reader: R, has_header: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut names: Option<Vec<String>> = None;
        let mut data: Vec<f64> = Vec::new();
        let mut width: Option<usize> = None;
        let mut rows = 0usize;
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() == 1 && record.get(0).is_some_and(str::is_empty) {
                continue;
            }
            if has_header && names.is_none() {
                names = Some(record.iter().map(str::to_string).collect());
                width = Some(record.len());
                continue;
            }
            match width {
                Some(w) if w != record.len() => {
                    return Err(Error::Structure(format!(
                        "row {line} has {} fields, expected {w}",
                        record.len()
                    )))
                }
                None => width = Some(record.len()),
                _ => {}
            }
            for (column, cell) in record.iter().enumerate() {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row: line,
                    column,
                    message: format!("not a number: {cell:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row: line,
                        column,
                        message: format!("non-finite value {cell:?}"),
                    });
                }
                data.push(v);
            }
            rows += 1;
        }
        let width = width.ok_or_else(|| Error::Structure("empty CSV input".into()))?;
        if rows == 0 {
            return Err(Error::Structure("CSV has no data rows".into()));
        }
        let values = Array2::from_shape_vec((rows, width), data)
            .map_err(|e| Error::Structure(e.to_string()))?;
        let names = names.unwrap_or_else(|| generated_names(width));
        Self::new(values, names)
    }

    pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_csv(BufReader::new(file), has_header)
    }

    /// Writes a header row and one LF-terminated row per tick. `f64`'s
    /// `Display` is the shortest representation that parses back to the same
    /// bits, so values round-trip exactly.
    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        write_matrix_csv(writer, &self.feature_names, self.values.view())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        self.write_csv_to(std::io::BufWriter::new(file))
    }
}

/// One (context, target) training pair cut from a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub context: Array2<f64>,
    pub target: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub context_length: usize,
    pub horizon: usize,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Argument(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Argument(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if self.train_fraction + self.val_fraction >= 1.0 {
            return Err(Error::Argument(
                "train_fraction + val_fraction must be below 1".into(),
            ));
        }
        if self.context_length == 0 || self.horizon == 0 {
            return Err(Error::Argument(
                "context_length and horizon must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Train/val/test lengths for a series of `len` rows. The small epsilon
    /// keeps products such as `0.29 * 100` from flooring one row short.
    pub fn segment_lengths(&self, len: usize) -> (usize, usize, usize) {
        let n = len as f64;
        let n_train = ((n * self.train_fraction) + 1e-9).floor() as usize;
        let n_val = ((n * self.val_fraction) + 1e-9).floor() as usize;
        let n_train = n_train.min(len);
        let n_val = n_val.min(len - n_train);
        (n_train, n_val, len - n_train - n_val)
    }
}

/// Start offsets of every window; the count is `floor((T - l - h) / stride) + 1`.
pub fn window_starts(
    len: usize,
    context_length: usize,
    horizon: usize,
    stride: usize,
) -> Result<std::iter::StepBy<std::ops::RangeInclusive<usize>>> {
    if context_length == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Argument(
            "context length, horizon and stride must be positive".into(),
        ));
    }
    if context_length + horizon > len {
        return Err(Error::Argument(format!(
            "context {context_length} + horizon {horizon} exceeds series length {len}"
        )));
    }
    Ok((0..=len - context_length - horizon).step_by(stride))
}

pub(crate) fn generated_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("f{i}")).collect()
}

/// Mean and population (denominator `n`) variance.
pub fn population_moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var)
}

pub(crate) fn write_matrix_csv<W: Write>(
    mut writer: W,
    header: &[String],
    values: ArrayView2<'_, f64>,
) -> Result<()> {
    writeln!(writer, "{}", header.join(","))?;
    for row in values.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(writer, "{}", line.join(","))?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn frame(values: &[f64]) -> SeriesFrame {
        SeriesFrame::univariate("x", values).unwrap()
    }

    #[test]
    fn loads_header_csv() {
        let f = SeriesFrame::read_csv("a,b\n1,2\n3,4\n5,6\n".as_bytes(), true).unwrap();
        assert_eq!(f.feature_names(), &["a", "b"]);
        assert_eq!(f.len(), 3);
        assert_eq!(f.values()[[2, 1]], 6.0);
    }

    #[test]
    fn headerless_csv_gets_generated_names_and_crlf_is_accepted() {
        let f = SeriesFrame::read_csv("1,2,3\r\n4,5,6\r\n".as_bytes(), false).unwrap();
        assert_eq!(f.feature_names(), &["f0", "f1", "f2"]);
        assert_eq!(f.values(), array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn empty_csv_is_structural_error() {
        let err = SeriesFrame::read_csv("".as_bytes(), true).unwrap_err();
        assert!(matches!(err, Error::Structure(_)), "{err}");
        let err = SeriesFrame::read_csv("a,b\n".as_bytes(), true).unwrap_err();
        assert!(matches!(err, Error::Structure(_)), "{err}");
    }

    #[test]
    fn nan_and_text_cells_are_parse_errors() {
        let err = SeriesFrame::read_csv("a\n1\nNaN\n".as_bytes(), true).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, column: 0, .. }), "{err}");
        let err = SeriesFrame::read_csv("1,x\n".as_bytes(), false).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 0, column: 1, .. }), "{err}");
        let err = SeriesFrame::read_csv("1,inf\n".as_bytes(), false).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn ragged_rows_are_structural_error() {
        let err = SeriesFrame::read_csv("1,2\n3\n".as_bytes(), false).unwrap_err();
        assert!(matches!(err, Error::Structure(_)), "{err}");
    }

    #[test]
    fn difference_examples() {
        let d = frame(&[1.0, 3.0, 6.0]).difference(1).unwrap();
        assert_eq!(d.column(0).to_vec(), vec![2.0, 3.0]);
        let d = frame(&[4.0; 5]).difference(1).unwrap();
        assert!(d.column(0).iter().all(|v| *v == 0.0));
        let d = frame(&[1.0, 3.0, 6.0, 10.0]).difference(2).unwrap();
        assert_eq!(d.column(0).to_vec(), vec![5.0, 7.0]);
        assert_eq!(d.time_index(), &[2, 3]);
        assert!(frame(&[1.0, 2.0]).difference(2).is_err());
    }

    #[test]
    fn split_rounding() {
        let spec = |tf, vf| SplitSpec {
            train_fraction: tf,
            val_fraction: vf,
            context_length: 1,
            horizon: 1,
        };
        let f = frame(&(0..100).map(f64::from).collect::<Vec<_>>());
        let (a, b, c) = f.split(&spec(0.6, 0.2)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));

        let f = frame(&(0..7).map(f64::from).collect::<Vec<_>>());
        let (a, b, c) = f.split(&spec(0.5, 0.25)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (3, 1, 3));

        let f = frame(&(0..10).map(f64::from).collect::<Vec<_>>());
        let (a, b, c) = f.split(&spec(0.5, 0.0)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (5, 0, 5));

        // a requested validation segment that rounds to nothing
        let f = frame(&(0..10).map(f64::from).collect::<Vec<_>>());
        assert!(f.split(&spec(0.5, 0.05)).is_err());
        assert!(f.split(&spec(0.5, 0.5)).is_err());
    }

    #[test]
    fn split_rejects_context_longer_than_train() {
        let f = frame(&(0..10).map(f64::from).collect::<Vec<_>>());
        let spec = SplitSpec {
            train_fraction: 0.5,
            val_fraction: 0.2,
            context_length: 4,
            horizon: 2,
        };
        assert!(f.split(&spec).is_err());
    }

    #[test]
    fn window_counts() {
        let f = frame(&(0..10).map(f64::from).collect::<Vec<_>>());
        // starts 0..=5
        let w = f.windows(3, 2, 1).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w[5].context.column(0).to_vec(), vec![5.0, 6.0, 7.0]);
        assert_eq!(w[5].target.column(0).to_vec(), vec![8.0, 9.0]);
        assert_eq!(f.windows(7, 3, 1).unwrap().len(), 1);
        assert_eq!(f.windows(3, 2, 10).unwrap().len(), 1);
        assert_eq!(f.windows(3, 2, 2).unwrap().len(), 3);
        assert!(f.windows(8, 3, 1).is_err());
    }

    #[test]
    fn rejects_bad_time_index() {
        let v = array![[1.0], [2.0]];
        assert!(SeriesFrame::with_time_index(v, vec!["a".into()], vec![3, 3]).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(
            rows in prop::collection::vec(prop::collection::vec(-1e300f64..1e300, 3), 1..20)
        ) {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let f = SeriesFrame::from_values(Array2::from_shape_vec((rows.len(), 3), flat).unwrap()).unwrap();
            let mut buf = Vec::new();
            f.write_csv_to(&mut buf).unwrap();
            let back = SeriesFrame::read_csv(buf.as_slice(), true).unwrap();
            for (a, b) in f.values().iter().zip(back.values().iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn difference_then_cumsum_reconstructs(
            xs in prop::collection::vec(-1e3f64..1e3, 5..40),
            order in 1usize..4,
        ) {
            let d = frame(&xs).difference(order).unwrap();
            let mut rebuilt = xs[..order].to_vec();
            for (i, dv) in d.column(0).iter().enumerate() {
                rebuilt.push(rebuilt[i] + dv);
            }
            for (a, b) in rebuilt.iter().zip(&xs) {
                prop_assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()) + 1e-12);
            }
        }

        #[test]
        fn split_segments_concatenate_to_original(
            len in 20usize..200,
            tf in 0.3f64..0.6,
            vf in 0.05f64..0.3,
        ) {
            let f = frame(&(0..len).map(|i| (i as f64).sin()).collect::<Vec<_>>());
            let spec = SplitSpec { train_fraction: tf, val_fraction: vf, context_length: 2, horizon: 1 };
            if let Ok((a, b, c)) = f.split(&spec) {
                let joined = SeriesFrame::concat(&[&a, &b, &c]).unwrap();
                prop_assert_eq!(joined, f);
            }
        }
    }
}
