//! Matrix-backed domain types shared by every stage of the pipeline.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, UnmixError};
use crate::linalg::all_finite;

/// Slack allowed on abundance row sums.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Slack allowed on abundance positivity.
pub const POSITIVITY_TOL: f64 = 1e-12;

/// An `N x L` reflectance cube flattened to pixels-by-bands.
///
/// When the image has been centered, `mean_spectrum` holds the per-band mean
/// that was removed so downstream spectra can be mapped back to reflectance.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperImage {
    pixels: DMatrix<f64>,
    mean_spectrum: Option<DVector<f64>>,
}

impl HyperImage {
    pub fn new(pixels: DMatrix<f64>) -> Result<Self> {
        if pixels.nrows() == 0 || pixels.ncols() == 0 {
            return Err(UnmixError::Dimension("image needs N >= 1 and L >= 1".into()));
        }
        if !all_finite(&pixels) {
            return Err(UnmixError::NonFinite("image pixels"));
        }
        Ok(Self {
            pixels,
            mean_spectrum: None,
        })
    }

    /// Rebuilds a centered image from stored parts.
    pub fn from_centered(pixels: DMatrix<f64>, mean_spectrum: DVector<f64>) -> Result<Self> {
        if mean_spectrum.len() != pixels.ncols() {
            return Err(UnmixError::Dimension(format!(
                "mean spectrum has {} bands, image has {}",
                mean_spectrum.len(),
                pixels.ncols()
            )));
        }
        let mut img = Self::new(pixels)?;
        if !mean_spectrum.iter().all(|v| v.is_finite()) {
            return Err(UnmixError::NonFinite("mean spectrum"));
        }
        img.mean_spectrum = Some(mean_spectrum);
        Ok(img)
    }

    pub fn pixels(&self) -> &DMatrix<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> DMatrix<f64> {
        self.pixels
    }

    pub fn n_pixels(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn n_bands(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn is_centered(&self) -> bool {
        self.mean_spectrum.is_some()
    }

    pub fn mean_spectrum(&self) -> Option<&DVector<f64>> {
        self.mean_spectrum.as_ref()
    }

    /// Removes the per-band mean.
    pub fn center(&self) -> Result<(HyperImage, DVector<f64>)> {
        if self.is_centered() {
            return Err(UnmixError::AlreadyCentered);
        }
        let n = self.n_pixels() as f64;
        let mean = DVector::from_iterator(
            self.n_bands(),
            self.pixels.column_iter().map(|c| c.sum() / n),
        );
        let mut centered = self.pixels.clone();
        for (mut col, m) in centered.column_iter_mut().zip(mean.iter()) {
            col.add_scalar_mut(-m);
        }
        let img = HyperImage {
            pixels: centered,
            mean_spectrum: Some(mean.clone()),
        };
        Ok((img, mean))
    }

    /// Adds the stored mean back. A non-centered image is returned unchanged.
    pub fn uncenter(&self) -> HyperImage {
        match &self.mean_spectrum {
            None => self.clone(),
            Some(mean) => {
                let mut pixels = self.pixels.clone();
                for (mut col, m) in pixels.column_iter_mut().zip(mean.iter()) {
                    col.add_scalar_mut(*m);
                }
                HyperImage {
                    pixels,
                    mean_spectrum: None,
                }
            }
        }
    }
}

/// `R` spectra stored as the columns of an `L x R` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberSet {
    spectra: DMatrix<f64>,
    names: Vec<String>,
    band_variance: Option<DMatrix<f64>>,
}

impl EndmemberSet {
    pub fn new(spectra: DMatrix<f64>) -> Result<Self> {
        let names = (1..=spectra.ncols()).map(|r| format!("m{r}")).collect();
        Self::with_names(spectra, names)
    }

    pub fn with_names(spectra: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if spectra.ncols() < 2 {
            return Err(UnmixError::InvalidArgument(format!(
                "an endmember set needs R >= 2, got {}",
                spectra.ncols()
            )));
        }
        if names.len() != spectra.ncols() {
            return Err(UnmixError::Dimension("one name per endmember".into()));
        }
        if !all_finite(&spectra) {
            return Err(UnmixError::NonFinite("endmember spectra"));
        }
        Ok(Self {
            spectra,
            names,
            band_variance: None,
        })
    }

    pub fn with_band_variance(mut self, variance: DMatrix<f64>) -> Result<Self> {
        if variance.shape() != self.spectra.shape() {
            return Err(UnmixError::Dimension("band variance shape must match spectra".into()));
        }
        if !all_finite(&variance) {
            return Err(UnmixError::NonFinite("band variance"));
        }
        if variance.iter().any(|v| *v < 0.0) {
            return Err(UnmixError::InvalidArgument("band variance must be >= 0".into()));
        }
        self.band_variance = Some(variance);
        Ok(self)
    }

    pub fn spectra(&self) -> &DMatrix<f64> {
        &self.spectra
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn band_variance(&self) -> Option<&DMatrix<f64>> {
        self.band_variance.as_ref()
    }

    pub fn n_endmembers(&self) -> usize {
        self.spectra.ncols()
    }

    pub fn n_bands(&self) -> usize {
        self.spectra.nrows()
    }

    /// Reorders columns so that column `r` of the result is column `perm[r]`
    /// of `self`.
    pub fn permuted(&self, perm: &[usize]) -> EndmemberSet {
        EndmemberSet {
            spectra: permute_columns(&self.spectra, perm),
            names: perm.iter().map(|&p| self.names[p].clone()).collect(),
            band_variance: self.band_variance.as_ref().map(|v| permute_columns(v, perm)),
        }
    }
}

/// Per-pixel fractions on the probability simplex, `N x R`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceMatrix {
    values: DMatrix<f64>,
}

impl AbundanceMatrix {
    /// Validates positivity and sum-to-one.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !all_finite(&values) {
            return Err(UnmixError::NonFinite("abundances"));
        }
        for (n, row) in values.row_iter().enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(UnmixError::InvalidArgument(format!(
                    "abundance row {n} sums to {s}"
                )));
            }
            if let Some(v) = row.iter().find(|v| **v < -POSITIVITY_TOL) {
                return Err(UnmixError::InvalidArgument(format!(
                    "abundance row {n} has negative entry {v}"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn n_pixels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_endmembers(&self) -> usize {
        self.values.ncols()
    }

    pub fn permuted(&self, perm: &[usize]) -> AbundanceMatrix {
        AbundanceMatrix {
            values: permute_columns(&self.values, perm),
        }
    }
}

pub(crate) fn permute_columns(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), perm.len());
    for (dst, &src) in perm.iter().enumerate() {
        out.set_column(dst, &m.column(src));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn center_two_pixels() {
        let img = HyperImage::new(DMatrix::from_row_slice(2, 1, &[1.0, 3.0])).unwrap();
        let (c, mean) = img.center().unwrap();
        assert_eq!(c.pixels().as_slice(), &[-1.0, 1.0]);
        assert_eq!(mean.as_slice(), &[2.0]);
    }

    #[test]
    fn center_zero_mean_is_identity() {
        let px = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, -1.0, 0.0, 0.0, 2.0]);
        let (c, mean) = HyperImage::new(px.clone()).unwrap().center().unwrap();
        assert_eq!(c.pixels(), &px);
        assert!(mean.iter().all(|m| *m == 0.0));
    }

    #[test]
    fn center_rejects_non_finite_and_double_centering() {
        let px = DMatrix::from_row_slice(2, 1, &[1.0, f64::NAN]);
        assert!(matches!(HyperImage::new(px), Err(UnmixError::NonFinite(_))));
        let img = HyperImage::new(DMatrix::from_element(2, 2, 1.0)).unwrap();
        let (c, _) = img.center().unwrap();
        assert!(matches!(c.center(), Err(UnmixError::AlreadyCentered)));
    }

    #[test]
    fn abundance_validation() {
        assert!(AbundanceMatrix::new(DMatrix::from_row_slice(1, 2, &[0.3, 0.7])).is_ok());
        assert!(AbundanceMatrix::new(DMatrix::from_row_slice(1, 2, &[0.3, 0.6])).is_err());
        assert!(AbundanceMatrix::new(DMatrix::from_row_slice(1, 2, &[-0.1, 1.1])).is_err());
    }

    #[test]
    fn endmembers_need_two_columns() {
        assert!(EndmemberSet::new(DMatrix::from_element(4, 1, 0.5)).is_err());
        let e = EndmemberSet::new(DMatrix::from_element(4, 2, 0.5)).unwrap();
        assert!(e
            .with_band_variance(DMatrix::from_element(4, 2, -1.0))
            .is_err());
    }

    proptest! {
        #[test]
        fn center_round_trip(vals in prop::collection::vec(-10.0f64..10.0, 15)) {
            let px = DMatrix::from_row_slice(5, 3, &vals);
            let img = HyperImage::new(px.clone()).unwrap();
            let (c, _) = img.center().unwrap();
            for col in c.pixels().column_iter() {
                prop_assert!(col.sum().abs() < 1e-12);
            }
            let back = c.uncenter();
            prop_assert!((back.pixels() - &px).amax() <= 1e-12);
        }
    }
}
