//! Domain types shared by every stage of the pipeline: tissue classes,
//! wavelength axes, image containers, and acquisition metadata.

use ndarray::{Array2, Array3};

use crate::error::{CoreError, Result};

/// The seven tissue classes distinguished by the annotation taxonomy.
///
/// The integer codes are stable and are what label maps and files store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TissueClass {
    Blood = 0,
    Skin = 1,
    UsGel = 2,
    Membrane = 3,
    HeavyWater = 4,
    OtherTissue = 5,
    CouplingArtefact = 6,
}

impl TissueClass {
    pub const COUNT: usize = 7;

    /// All classes in code order.
    pub const ALL: [TissueClass; 7] = [
        TissueClass::Blood,
        TissueClass::Skin,
        TissueClass::UsGel,
        TissueClass::Membrane,
        TissueClass::HeavyWater,
        TissueClass::OtherTissue,
        TissueClass::CouplingArtefact,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<TissueClass> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Blood => "blood",
            TissueClass::Skin => "skin",
            TissueClass::UsGel => "us_gel",
            TissueClass::Membrane => "membrane",
            TissueClass::HeavyWater => "heavy_water",
            TissueClass::OtherTissue => "other_tissue",
            TissueClass::CouplingArtefact => "coupling_artefact",
        }
    }

    pub fn parse(s: &str) -> Result<TissueClass> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| CoreError::invalid("tissue class", format!("unknown class '{s}'")))
    }
}

impl std::fmt::Display for TissueClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An equidistant wavelength grid in nanometres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavelengthAxis {
    count: usize,
    start_nm: f64,
    end_nm: f64,
}

impl WavelengthAxis {
    pub fn new(count: usize, start_nm: f64, end_nm: f64) -> Result<Self> {
        if count < 2 {
            return Err(CoreError::invalid("wavelength axis", "count must be >= 2"));
        }
        if !(start_nm.is_finite() && end_nm.is_finite()) || end_nm <= start_nm {
            return Err(CoreError::invalid(
                "wavelength axis",
                format!("range [{start_nm}, {end_nm}] nm is not increasing"),
            ));
        }
        Ok(WavelengthAxis {
            count,
            start_nm,
            end_nm,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn start_nm(&self) -> f64 {
        self.start_nm
    }

    pub fn end_nm(&self) -> f64 {
        self.end_nm
    }

    /// The i-th wavelength: start + i * (end - start) / (count - 1).
    pub fn wavelength(&self, i: usize) -> f64 {
        debug_assert!(i < self.count);
        self.start_nm + i as f64 * (self.end_nm - self.start_nm) / (self.count - 1) as f64
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.wavelength(i)).collect()
    }
}

impl Default for WavelengthAxis {
    /// 26 wavelengths equidistant from 700 nm to 950 nm.
    fn default() -> Self {
        WavelengthAxis {
            count: 26,
            start_nm: 700.0,
            end_nm: 950.0,
        }
    }
}

/// A multispectral image stack: one image per wavelength, shape
/// `(channels, height, width)` with `channels == axis.count()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    axis: WavelengthAxis,
    values: Array3<f32>,
}

impl SpectralCube {
    pub fn new(axis: WavelengthAxis, values: Array3<f32>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c != axis.count() {
            return Err(CoreError::invalid(
                "spectral cube",
                format!("{} channels but axis has {} wavelengths", c, axis.count()),
            ));
        }
        if h == 0 || w == 0 {
            return Err(CoreError::invalid("spectral cube", "empty spatial extent"));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::invalid("spectral cube", "non-finite value"));
        }
        Ok(SpectralCube { axis, values })
    }

    pub fn axis(&self) -> &WavelengthAxis {
        &self.axis
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }
}

/// A single co-registered ultrasound image, shape `(height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UsImage {
    values: Array2<f32>,
}

impl UsImage {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        let (h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(CoreError::invalid("ultrasound image", "empty extent"));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::invalid("ultrasound image", "non-finite value"));
        }
        Ok(UsImage { values })
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }
}

/// A per-pixel tissue-class assignment, shape `(height, width)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    values: Array2<u8>,
}

impl LabelMap {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        let (h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(CoreError::invalid("label map", "empty extent"));
        }
        if let Some(bad) = values.iter().find(|&&v| TissueClass::from_code(v).is_none()) {
            return Err(CoreError::invalid(
                "label map",
                format!("unknown class code {bad}"),
            ));
        }
        Ok(LabelMap { values })
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn class_at(&self, row: usize, col: usize) -> TissueClass {
        TissueClass::from_code(self.values[(row, col)]).expect("validated at construction")
    }

    /// Number of pixels carrying each class code.
    pub fn class_histogram(&self) -> [usize; TissueClass::COUNT] {
        let mut hist = [0usize; TissueClass::COUNT];
        for &v in self.values.iter() {
            hist[v as usize] += 1;
        }
        hist
    }

    pub fn contains_class(&self, cls: TissueClass) -> bool {
        self.values.iter().any(|&v| v == cls.code())
    }
}

/// Anatomical site of an acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Forearm,
    Calf,
    Neck,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::Forearm, Site::Calf, Site::Neck];

    pub fn name(self) -> &'static str {
        match self {
            Site::Forearm => "forearm",
            Site::Calf => "calf",
            Site::Neck => "neck",
        }
    }

    pub fn parse(s: &str) -> Result<Site> {
        match s {
            "forearm" => Ok(Site::Forearm),
            "calf" => Ok(Site::Calf),
            "neck" => Ok(Site::Neck),
            other => Err(CoreError::invalid("site", format!("unknown site '{other}'"))),
        }
    }
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Body side of an acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const ALL: [Side; 2] = [Side::Left, Side::Right];

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Result<Side> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(CoreError::invalid("side", format!("unknown side '{other}'"))),
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Acquisition metadata attached to every sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleMeta {
    pub volunteer_id: u32,
    pub site: Site,
    pub side: Side,
    /// Index of the imaged location within a site/side, in {0, 1, 2}.
    pub location_index: u8,
}

impl SampleMeta {
    pub fn new(volunteer_id: u32, site: Site, side: Side, location_index: u8) -> Result<Self> {
        if location_index > 2 {
            return Err(CoreError::invalid(
                "sample metadata",
                format!("location index {location_index} outside 0..=2"),
            ));
        }
        Ok(SampleMeta {
            volunteer_id,
            site,
            side,
            location_index,
        })
    }
}

/// Identifier naming one PA/US/label triple within a dataset.
pub type SampleId = String;

/// One co-registered acquisition: PA cube, US image, reference labels,
/// and metadata, all sharing the same spatial extent.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: SampleId,
    pub pa: SpectralCube,
    pub us: UsImage,
    pub labels: LabelMap,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn new(
        id: SampleId,
        pa: SpectralCube,
        us: UsImage,
        labels: LabelMap,
        meta: SampleMeta,
    ) -> Result<Self> {
        let dims = (pa.height(), pa.width());
        if (us.height(), us.width()) != dims || (labels.height(), labels.width()) != dims {
            return Err(CoreError::Sample {
                id,
                reason: format!(
                    "dimension mismatch: pa {}x{}, us {}x{}, labels {}x{}",
                    pa.height(),
                    pa.width(),
                    us.height(),
                    us.width(),
                    labels.height(),
                    labels.width()
                ),
            });
        }
        Ok(Sample {
            id,
            pa,
            us,
            labels,
            meta,
        })
    }

    pub fn height(&self) -> usize {
        self.pa.height()
    }

    pub fn width(&self) -> usize {
        self.pa.width()
    }
}
