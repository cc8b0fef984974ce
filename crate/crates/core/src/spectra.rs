//! Chromophore absorption spectra and spectral comparison helpers.
//!
//! Three built-in spectra (oxygenated haemoglobin, deoxygenated
//! haemoglobin, melanin) are embedded at compile time and drive both
//! phantom rendering and plausibility checks of predicted tissue
//! spectra.

use std::sync::OnceLock;

use crate::error::{CoreError, Result};
use crate::types::{LabelMap, SpectralCube, TissueClass, WavelengthAxis};

/// A sampled absorption spectrum with linear interpolation between knots.
#[derive(Debug, Clone, PartialEq)]
pub struct ChromophoreSpectrum {
    name: String,
    wavelengths_nm: Vec<f64>,
    values: Vec<f64>,
}

impl ChromophoreSpectrum {
    pub fn new(name: impl Into<String>, wavelengths_nm: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if wavelengths_nm.len() != values.len() {
            return Err(CoreError::invalid(
                "chromophore spectrum",
                format!(
                    "'{name}': {} wavelengths but {} values",
                    wavelengths_nm.len(),
                    values.len()
                ),
            ));
        }
        if wavelengths_nm.len() < 2 {
            return Err(CoreError::invalid(
                "chromophore spectrum",
                format!("'{name}': needs at least 2 knots"),
            ));
        }
        if !wavelengths_nm.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::invalid(
                "chromophore spectrum",
                format!("'{name}': wavelengths must strictly increase"),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::invalid(
                "chromophore spectrum",
                format!("'{name}': non-finite value"),
            ));
        }
        Ok(ChromophoreSpectrum {
            name,
            wavelengths_nm,
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn min_nm(&self) -> f64 {
        self.wavelengths_nm[0]
    }

    pub fn max_nm(&self) -> f64 {
        *self.wavelengths_nm.last().unwrap()
    }

    /// Linear interpolation at `nm`; exact at knots, error outside the
    /// covered range.
    pub fn value_at(&self, nm: f64) -> Result<f64> {
        if !(nm >= self.min_nm() && nm <= self.max_nm()) {
            return Err(CoreError::invalid(
                "wavelength",
                format!(
                    "{nm} nm outside '{}' coverage [{}, {}]",
                    self.name,
                    self.min_nm(),
                    self.max_nm()
                ),
            ));
        }
        // partition_point finds the first knot > nm; nm then lies in
        // [knot[i-1], knot[i]].
        let i = self.wavelengths_nm.partition_point(|&w| w <= nm);
        if i == self.wavelengths_nm.len() {
            return Ok(*self.values.last().unwrap());
        }
        if self.wavelengths_nm[i - 1] == nm {
            return Ok(self.values[i - 1]);
        }
        let (w0, w1) = (self.wavelengths_nm[i - 1], self.wavelengths_nm[i]);
        let (v0, v1) = (self.values[i - 1], self.values[i]);
        let t = (nm - w0) / (w1 - w0);
        Ok(v0 + t * (v1 - v0))
    }

    /// Values at every wavelength of `axis`.
    pub fn sample_axis(&self, axis: &WavelengthAxis) -> Result<Vec<f64>> {
        (0..axis.count())
            .map(|i| self.value_at(axis.wavelength(i)))
            .collect()
    }
}

fn parse_builtin(text: &str) -> Result<Vec<ChromophoreSpectrum>> {
    let mut out = Vec::new();
    let mut name: Option<String> = None;
    let mut wl = Vec::new();
    let mut vals = Vec::new();
    let mut flush = |name: &mut Option<String>, wl: &mut Vec<f64>, vals: &mut Vec<f64>| -> Result<()> {
        if let Some(n) = name.take() {
            out.push(ChromophoreSpectrum::new(n, std::mem::take(wl), std::mem::take(vals))?);
        }
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with("##") {
            continue;
        }
        if let Some(section) = line.strip_prefix('#') {
            flush(&mut name, &mut wl, &mut vals)?;
            name = Some(section.trim().to_owned());
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(w), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(CoreError::invalid(
                "chromophore table",
                format!("line {}: expected 'wavelength value'", i + 1),
            ));
        };
        if name.is_none() {
            return Err(CoreError::invalid(
                "chromophore table",
                format!("line {}: data before any #section", i + 1),
            ));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                CoreError::invalid(
                    "chromophore table",
                    format!("line {}: bad number '{s}'", i + 1),
                )
            })
        };
        wl.push(parse(w)?);
        vals.push(parse(v)?);
    }
    flush(&mut name, &mut wl, &mut vals)?;
    Ok(out)
}

const BUILTIN_TABLE: &str = include_str!("../assets/chromophores.txt");

fn builtin_table() -> &'static [ChromophoreSpectrum] {
    static CACHE: OnceLock<Vec<ChromophoreSpectrum>> = OnceLock::new();
    CACHE.get_or_init(|| parse_builtin(BUILTIN_TABLE).expect("embedded chromophore table is valid"))
}

/// All built-in spectra: hbo2, hb, melanin.
pub fn builtin() -> &'static [ChromophoreSpectrum] {
    builtin_table()
}

fn builtin_named(name: &str) -> &'static ChromophoreSpectrum {
    builtin_table()
        .iter()
        .find(|s| s.name == name)
        .expect("embedded chromophore table has the builtin names")
}

/// Oxygenated haemoglobin molar extinction.
pub fn hbo2() -> &'static ChromophoreSpectrum {
    builtin_named("hbo2")
}

/// Deoxygenated haemoglobin molar extinction.
pub fn hb() -> &'static ChromophoreSpectrum {
    builtin_named("hb")
}

/// Melanin absorption (power-law shape).
pub fn melanin() -> &'static ChromophoreSpectrum {
    builtin_named("melanin")
}

/// Per-channel mean of `cube` over the pixels labelled `class`, or
/// `None` if the class is absent from `labels`.
pub fn mean_class_spectrum(
    cube: &SpectralCube,
    labels: &LabelMap,
    class: TissueClass,
) -> Result<Option<Vec<f64>>> {
    let (c, h, w) = cube.values().dim();
    if (labels.height(), labels.width()) != (h, w) {
        return Err(CoreError::invalid(
            "mean class spectrum",
            format!(
                "cube is {h}x{w} but labels are {}x{}",
                labels.height(),
                labels.width()
            ),
        ));
    }
    let mut sums = vec![0.0f64; c];
    let mut count = 0usize;
    for row in 0..h {
        for col in 0..w {
            if labels.values()[(row, col)] == class.code() {
                count += 1;
                for ch in 0..c {
                    sums[ch] += cube.values()[(ch, row, col)] as f64;
                }
            }
        }
    }
    if count == 0 {
        return Ok(None);
    }
    for s in &mut sums {
        *s /= count as f64;
    }
    Ok(Some(sums))
}

/// Rescales to [0, 1] by min and max; a constant input maps to all
/// zeros so downstream comparisons see "no spectral shape".
pub fn normalize_min_max(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Pearson correlation of two equal-length spectra, in [-1, 1].
/// Shape-only: invariant to affine rescaling of either argument.
pub fn spectral_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::invalid(
            "spectral similarity",
            format!("length mismatch {} vs {}", a.len(), b.len()),
        ));
    }
    if a.len() < 2 {
        return Err(CoreError::invalid(
            "spectral similarity",
            "needs at least 2 samples",
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(CoreError::invalid(
            "spectral similarity",
            "constant spectrum has no shape to correlate",
        ));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}
