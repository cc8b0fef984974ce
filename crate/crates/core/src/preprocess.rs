//! Raw acquisition preprocessing: pulse-energy correction, acutance
//! driven section selection, and the co-registration crop.
//!
//! A raw recording is a sequence of repeated frames. The chain divides
//! every frame by its laser pulse energy, partitions the sequence into
//! contiguous sections, averages each section, keeps the sharpest
//! average, and finally crops to the co-registered region.
//!
//! Frame arithmetic is f64 so the acutance anchors (0 for a constant
//! image, 1 for a unit ramp, sqrt(2) for a checkerboard) hold exactly.

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};

use crate::error::{CoreError, Result};
use crate::types::SpectralCube;

/// A raw repeated acquisition: one 2-d frame per laser pulse, with the
/// pulse energy recorded alongside each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Array2<f64>>,
    pulse_energies: Vec<f64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Array2<f64>>, pulse_energies: Vec<f64>) -> Result<Self> {
        if frames.is_empty() {
            return Err(CoreError::invalid("frame sequence", "no frames"));
        }
        if frames.len() != pulse_energies.len() {
            return Err(CoreError::invalid(
                "frame sequence",
                format!(
                    "{} frames but {} pulse energies",
                    frames.len(),
                    pulse_energies.len()
                ),
            ));
        }
        let dim = frames[0].dim();
        if dim.0 == 0 || dim.1 == 0 {
            return Err(CoreError::invalid("frame sequence", "empty frame extent"));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(CoreError::invalid(
                    "frame sequence",
                    format!("frame {i} is {:?}, expected {dim:?}", f.dim()),
                ));
            }
            if !f.iter().all(|v| v.is_finite()) {
                return Err(CoreError::invalid(
                    "frame sequence",
                    format!("frame {i} has a non-finite value"),
                ));
            }
        }
        if let Some((i, &e)) = pulse_energies
            .iter()
            .enumerate()
            .find(|(_, &e)| !(e.is_finite() && e > 0.0))
        {
            return Err(CoreError::invalid(
                "frame sequence",
                format!("pulse energy {e} of frame {i} is not positive and finite"),
            ));
        }
        Ok(FrameSequence {
            frames,
            pulse_energies,
        })
    }

    pub fn frames(&self) -> &[Array2<f64>] {
        &self.frames
    }

    pub fn pulse_energies(&self) -> &[f64] {
        &self.pulse_energies
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty sequences
    }

    pub fn frame_dim(&self) -> (usize, usize) {
        self.frames[0].dim()
    }
}

/// Divides every frame by its pulse energy.
pub fn energy_correct(seq: &FrameSequence) -> Vec<Array2<f64>> {
    seq.frames
        .iter()
        .zip(&seq.pulse_energies)
        .map(|(f, &e)| f.mapv(|v| v / e))
        .collect()
}

/// Mean gradient magnitude of an image: forward differences, falling
/// back to backward differences on the far row and column. A single
/// row or column contributes no gradient along that axis.
pub fn acutance(image: &ArrayView2<f64>) -> f64 {
    let (h, w) = image.dim();
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let gx = if w == 1 {
                0.0
            } else if c + 1 < w {
                image[(r, c + 1)] - image[(r, c)]
            } else {
                image[(r, c)] - image[(r, c - 1)]
            };
            let gy = if h == 1 {
                0.0
            } else if r + 1 < h {
                image[(r + 1, c)] - image[(r, c)]
            } else {
                image[(r, c)] - image[(r - 1, c)]
            };
            total += (gx * gx + gy * gy).sqrt();
        }
    }
    total / (h * w) as f64
}

/// Near-equal contiguous section bounds: the first `frames % sections`
/// sections take one extra frame. Returned as `(start, end)` pairs.
pub fn section_bounds(n_frames: usize, n_sections: usize) -> Result<Vec<(usize, usize)>> {
    if n_sections == 0 {
        return Err(CoreError::invalid("sections", "zero sections"));
    }
    if n_frames < n_sections {
        return Err(CoreError::invalid(
            "sections",
            format!("{n_frames} frames cannot fill {n_sections} sections"),
        ));
    }
    let base = n_frames / n_sections;
    let extra = n_frames % n_sections;
    let mut bounds = Vec::with_capacity(n_sections);
    let mut start = 0;
    for s in 0..n_sections {
        let len = base + usize::from(s < extra);
        bounds.push((start, start + len));
        start += len;
    }
    Ok(bounds)
}

fn mean_of(frames: &[Array2<f64>], start: usize, end: usize) -> Array2<f64> {
    let mut acc = frames[start].clone();
    for f in &frames[start + 1..end] {
        acc += f;
    }
    acc / (end - start) as f64
}

/// Section choice detail: the winning average, its index, and every
/// section's acutance.
#[derive(Debug, Clone)]
pub struct SectionChoice {
    pub image: Array2<f64>,
    pub section_index: usize,
    pub acutances: Vec<f64>,
}

/// Energy-corrects the sequence, partitions it into `n_sections`
/// contiguous near-equal parts, averages each part, and returns the
/// average with the highest acutance. Ties go to the lowest section
/// index.
pub fn select_best_section(seq: &FrameSequence, n_sections: usize) -> Result<Array2<f64>> {
    Ok(select_best_section_detailed(seq, n_sections)?.image)
}

/// [`select_best_section`] with the index and per-section acutances.
pub fn select_best_section_detailed(
    seq: &FrameSequence,
    n_sections: usize,
) -> Result<SectionChoice> {
    let corrected = energy_correct(seq);
    let bounds = section_bounds(corrected.len(), n_sections)?;
    let mut best: Option<(usize, f64, Array2<f64>)> = None;
    let mut acutances = Vec::with_capacity(n_sections);
    for (i, &(start, end)) in bounds.iter().enumerate() {
        let avg = mean_of(&corrected, start, end);
        let a = acutance(&avg.view());
        acutances.push(a);
        let better = match &best {
            None => true,
            Some((_, best_a, _)) => a > *best_a,
        };
        if better {
            best = Some((i, a, avg));
        }
    }
    let (section_index, _, image) = best.expect("n_sections >= 1");
    Ok(SectionChoice {
        image,
        section_index,
        acutances,
    })
}

/// A rectangular crop, `top`/`left` inclusive, `height`/`width` >= 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropSpec {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::invalid("crop", "empty crop"));
        }
        Ok(CropSpec {
            top,
            left,
            height,
            width,
        })
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.top + self.height > h || self.left + self.width > w {
            return Err(CoreError::invalid(
                "crop",
                format!(
                    "region {}+{} x {}+{} exceeds image {h}x{w}",
                    self.top, self.height, self.left, self.width
                ),
            ));
        }
        Ok(())
    }
}

/// Cuts the co-registered region out of every channel of a cube; the
/// wavelength axis is unchanged.
pub fn coregister_crop(pa: &SpectralCube, spec: &CropSpec) -> Result<SpectralCube> {
    spec.check(pa.height(), pa.width())?;
    let cropped = pa
        .values()
        .slice(ndarray::s![
            ..,
            spec.top..spec.top + spec.height,
            spec.left..spec.left + spec.width
        ])
        .to_owned();
    SpectralCube::new(*pa.axis(), cropped)
}

/// f64 variant of [`coregister_crop`] for mid-pipeline cubes.
pub fn crop_cube(cube: &Array3<f64>, spec: &CropSpec) -> Result<Array3<f64>> {
    let (_, h, w) = cube.dim();
    spec.check(h, w)?;
    Ok(cube
        .slice(ndarray::s![
            ..,
            spec.top..spec.top + spec.height,
            spec.left..spec.left + spec.width
        ])
        .to_owned())
}

/// Outcome of the full chain on one multispectral recording.
#[derive(Debug, Clone)]
pub struct StackOutcome {
    /// `(channels, H, W)` cube: energy-corrected, section-averaged,
    /// cropped if a crop was given.
    pub cube: Array3<f64>,
    pub section_index: usize,
    pub acutances: Vec<f64>,
}

/// Full chain for a multispectral recording stored as a
/// `(repeats, channels, H, W)` stack with one pulse energy per
/// `(repeat, channel)` image: energy-correct, choose the section once
/// on the mean-over-channels image so all channels stay aligned, then
/// average the chosen section per channel and crop.
pub fn preprocess_stack(
    stack: &Array4<f64>,
    energies: &Array2<f64>,
    n_sections: usize,
    crop: Option<&CropSpec>,
) -> Result<StackOutcome> {
    let (reps, chans, h, w) = stack.dim();
    if reps == 0 || chans == 0 || h == 0 || w == 0 {
        return Err(CoreError::invalid("frame stack", "empty dimension"));
    }
    if energies.dim() != (reps, chans) {
        return Err(CoreError::invalid(
            "frame stack",
            format!(
                "energies are {:?} but stack repeats x channels is ({reps}, {chans})",
                energies.dim()
            ),
        ));
    }
    if !stack.iter().all(|v| v.is_finite()) {
        return Err(CoreError::invalid("frame stack", "non-finite value"));
    }
    if let Some(bad) = energies.iter().find(|&&e| !(e.is_finite() && e > 0.0)) {
        return Err(CoreError::invalid(
            "frame stack",
            format!("pulse energy {bad} is not positive and finite"),
        ));
    }

    let mut corrected = stack.clone();
    for r in 0..reps {
        for c in 0..chans {
            let e = energies[(r, c)];
            corrected
                .index_axis_mut(Axis(0), r)
                .index_axis_mut(Axis(0), c)
                .mapv_inplace(|v| v / e);
        }
    }

    // Selection happens once, on the per-repeat mean over channels.
    let mean_frames: Vec<Array2<f64>> = (0..reps)
        .map(|r| {
            corrected
                .index_axis(Axis(0), r)
                .mean_axis(Axis(0))
                .expect("at least one channel")
        })
        .collect();
    let mean_seq = FrameSequence::new(mean_frames, vec![1.0; reps])?;
    let choice = select_best_section_detailed(&mean_seq, n_sections)?;
    let bounds = section_bounds(reps, n_sections)?;
    let (start, end) = bounds[choice.section_index];

    let cube = corrected
        .slice(ndarray::s![start..end, .., .., ..])
        .mean_axis(Axis(0))
        .expect("non-empty section");
    let cube = match crop {
        Some(c) => crop_cube(&cube, c)?,
        None => cube,
    };
    Ok(StackOutcome {
        cube,
        section_index: choice.section_index,
        acutances: choice.acutances,
    })
}
