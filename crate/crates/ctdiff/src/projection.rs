//! Pre-log projection container.
//!
//! A [`Projection`] holds normalized transmission fractions: raw detector
//! counts divided by the incident photon count per bin. Clean data lies in
//! `(0, 1]`; noisy realizations may exceed 1 or dip to or below 0 because
//! electronic noise is additive in counts. Post-log sinograms (line
//! integrals) reuse the same container; the value domain is documented at
//! each producing operation.

use crate::error::{Error, Result};

/// Row-major grid of detector samples: `n_views` rows of `n_bins` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    n_views: usize,
    n_bins: usize,
    data: Vec<f32>,
    /// Incident photons per bin behind this realization, when known.
    /// Recorded by the dose simulator; `None` for clean or derived data.
    incident_photons: Option<f64>,
}

impl Projection {
    pub fn new(n_views: usize, n_bins: usize, data: Vec<f32>) -> Result<Self> {
        if n_views == 0 || n_bins == 0 {
            return Err(Error::invalid("projection dimensions must be nonzero"));
        }
        if data.len() != n_views * n_bins {
            return Err(Error::shape_mismatch(
                format!("{n_views}x{n_bins} = {} values", n_views * n_bins),
                format!("{} values", data.len()),
            ));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: value as f64,
            });
        }
        Ok(Self {
            n_views,
            n_bins,
            data,
            incident_photons: None,
        })
    }

    pub fn zeros(n_views: usize, n_bins: usize) -> Self {
        Self {
            n_views,
            n_bins,
            data: vec![0.0; n_views * n_bins],
            incident_photons: None,
        }
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn view(&self, v: usize) -> &[f32] {
        &self.data[v * self.n_bins..(v + 1) * self.n_bins]
    }

    pub fn incident_photons(&self) -> Option<f64> {
        self.incident_photons
    }

    pub fn set_incident_photons(&mut self, photons: f64) {
        self.incident_photons = Some(photons);
    }

    pub fn same_shape(&self, other: &Projection) -> bool {
        self.n_views == other.n_views && self.n_bins == other.n_bins
    }

    /// Replaces the samples, keeping shape (metadata is dropped).
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Projection::new(self.n_views, self.n_bins, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            n_views: self.n_views,
            n_bins: self.n_bins,
            data: self.data.iter().map(|&v| f(v)).collect(),
            incident_photons: self.incident_photons,
        }
    }
}
