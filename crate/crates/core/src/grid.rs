//! Dense gridded fields with named channels.

use crate::error::{Error, Result};

/// Row-major tensor whose last axis is named channels.
///
/// A single field is `[H, W, C]`; a stack of days is `[N, H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    dims: Vec<usize>,
    channels: Vec<String>,
    data: Vec<f64>,
}

impl GridTensor {
    pub fn new(dims: Vec<usize>, channels: Vec<String>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Shape(format!(
                "grid dims must be nonempty and positive, got {dims:?}"
            )));
        }
        let c = *dims.last().expect("nonempty");
        if channels.len() != c {
            return Err(Error::Shape(format!(
                "{} channel names for {c} channels",
                channels.len()
            )));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!("{} values for dims {dims:?}", data.len())));
        }
        Ok(GridTensor { dims, channels, data })
    }

    pub fn zeros(dims: Vec<usize>, channels: Vec<String>) -> Result<Self> {
        let n = dims.iter().product();
        GridTensor::new(dims, channels, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of grid cells per sample, i.e. `H·W`.
    pub fn cells(&self) -> usize {
        let n = self.dims.len();
        if n < 3 {
            return self.dims[0];
        }
        self.dims[n - 3] * self.dims[n - 2]
    }

    /// `(H, W)` of a 3-D or 4-D tensor.
    pub fn spatial(&self) -> Result<(usize, usize)> {
        let n = self.dims.len();
        if n < 3 {
            return Err(Error::Shape(format!("expected at least 3 dims, got {:?}", self.dims)));
        }
        Ok((self.dims[n - 3], self.dims[n - 2]))
    }

    /// Number of samples along the leading axis of a 4-D tensor (1 for 3-D).
    pub fn n_samples(&self) -> usize {
        if self.dims.len() == 4 {
            self.dims[0]
        } else {
            1
        }
    }

    /// One `[H, W, C]` slice of a 4-D tensor.
    pub fn sample(&self, i: usize) -> Result<GridTensor> {
        if self.dims.len() != 4 || i >= self.dims[0] {
            return Err(Error::Shape(format!(
                "sample {i} out of range for dims {:?}",
                self.dims
            )));
        }
        let stride: usize = self.dims[1..].iter().product();
        GridTensor::new(
            self.dims[1..].to_vec(),
            self.channels.clone(),
            self.data[i * stride..(i + 1) * stride].to_vec(),
        )
    }

    /// Stacks equally shaped `[H, W, C]` fields along a new leading axis.
    pub fn stack(fields: &[GridTensor]) -> Result<GridTensor> {
        let first = fields
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero fields".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * fields.len());
        for f in fields {
            if f.dims != first.dims || f.channels != first.channels {
                return Err(Error::Shape("stacked fields differ in shape or channels".into()));
            }
            data.extend_from_slice(&f.data);
        }
        let mut dims = vec![fields.len()];
        dims.extend_from_slice(&first.dims);
        GridTensor::new(dims, first.channels.clone(), data)
    }

    /// Keeps only the named channels, in the given order.
    pub fn select_channels(&self, names: &[&str]) -> Result<GridTensor> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.channels
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::Shape(format!("no channel named {n:?}")))
            })
            .collect::<Result<_>>()?;
        let c = self.n_channels();
        let mut data = Vec::with_capacity(self.data.len() / c * idx.len());
        for chunk in self.data.chunks_exact(c) {
            data.extend(idx.iter().map(|&i| chunk[i]));
        }
        let mut dims = self.dims.clone();
        *dims.last_mut().expect("nonempty") = idx.len();
        GridTensor::new(dims, names.iter().map(|s| s.to_string()).collect(), data)
    }
}
