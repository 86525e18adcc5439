//! Multi-channel slide rasters: loading, validation, 16→8-bit conversion and
//! lossless persistence.
//!
//! A slide on disk is either a multi-page/multi-sample TIFF or PNG addressed
//! through a role→plane map, or a JSON sidecar naming one grayscale PNG per
//! channel. [`save_slide`] always writes the sidecar form.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GandaError, Result};
use crate::raster::Plane;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ChannelRole {
    /// Cell nuclei (DAPI stain).
    #[serde(alias = "nuclei")]
    Nuclei,
    /// Vessel endothelium (CD31 stain).
    #[serde(alias = "vessel")]
    Vessel,
    /// Nanoparticle signal (quantum dots).
    #[serde(alias = "np")]
    Np,
}

impl ChannelRole {
    pub const ALL: [ChannelRole; 3] = [ChannelRole::Nuclei, ChannelRole::Vessel, ChannelRole::Np];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelRole::Nuclei => "nuclei",
            ChannelRole::Vessel => "vessel",
            ChannelRole::Np => "np",
        }
    }
}

/// Which source channels feed the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SourceMode {
    #[serde(alias = "nuclei")]
    Nuclei,
    #[serde(alias = "vessel")]
    Vessel,
    #[serde(alias = "both")]
    Both,
}

impl SourceMode {
    pub fn roles(self) -> &'static [ChannelRole] {
        match self {
            SourceMode::Nuclei => &[ChannelRole::Nuclei],
            SourceMode::Vessel => &[ChannelRole::Vessel],
            SourceMode::Both => &[ChannelRole::Nuclei, ChannelRole::Vessel],
        }
    }

    pub fn channel_count(self) -> usize {
        self.roles().len()
    }
}

impl std::str::FromStr for SourceMode {
    type Err = GandaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nuclei" => Ok(SourceMode::Nuclei),
            "vessel" => Ok(SourceMode::Vessel),
            "both" => Ok(SourceMode::Both),
            other => Err(GandaError::InvalidConfig(format!(
                "unknown source mode {other:?} (expected nuclei, vessel or both)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPlane {
    pub role: ChannelRole,
    pub data: Plane,
}

/// A whole-slide raster with one 8-bit plane per channel role.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideImage {
    slide_id: String,
    width_px: usize,
    height_px: usize,
    pixel_size_um: f64,
    channels: Vec<ChannelPlane>,
}

impl SlideImage {
    pub fn new(
        slide_id: impl Into<String>,
        pixel_size_um: f64,
        channels: Vec<ChannelPlane>,
    ) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| GandaError::InvalidParams("slide needs at least one channel".into()))?;
        let (width_px, height_px) = first.data.dims();
        if !(pixel_size_um.is_finite() && pixel_size_um > 0.0) {
            return Err(GandaError::InvalidParams(format!(
                "pixel size must be positive, got {pixel_size_um}"
            )));
        }
        for (i, c) in channels.iter().enumerate() {
            if c.data.dims() != (width_px, height_px) {
                return Err(GandaError::ShapeMismatch(format!(
                    "channel {:?} is {}x{}, slide is {width_px}x{height_px}",
                    c.role,
                    c.data.width(),
                    c.data.height()
                )));
            }
            if channels[..i].iter().any(|o| o.role == c.role) {
                return Err(GandaError::DuplicateRole(c.role));
            }
        }
        Ok(SlideImage {
            slide_id: slide_id.into(),
            width_px,
            height_px,
            pixel_size_um,
            channels,
        })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn width_px(&self) -> usize {
        self.width_px
    }

    pub fn height_px(&self) -> usize {
        self.height_px
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width_px, self.height_px)
    }

    pub fn pixel_size_um(&self) -> f64 {
        self.pixel_size_um
    }

    pub fn channels(&self) -> &[ChannelPlane] {
        &self.channels
    }

    pub fn channel(&self, role: ChannelRole) -> Option<&Plane> {
        self.channels.iter().find(|c| c.role == role).map(|c| &c.data)
    }

    pub fn require(&self, role: ChannelRole) -> Result<&Plane> {
        self.channel(role).ok_or(GandaError::MissingChannel(role))
    }

    pub fn with_slide_id(mut self, slide_id: impl Into<String>) -> Self {
        self.slide_id = slide_id.into();
        self
    }

    /// Replaces (or adds) the plane for `role`.
    pub fn with_channel(mut self, role: ChannelRole, data: Plane) -> Result<Self> {
        if data.dims() != self.dims() {
            return Err(GandaError::ShapeMismatch(format!(
                "{:?} plane is {}x{}, slide is {}x{}",
                role,
                data.width(),
                data.height(),
                self.width_px,
                self.height_px
            )));
        }
        match self.channels.iter_mut().find(|c| c.role == role) {
            Some(c) => c.data = data,
            None => self.channels.push(ChannelPlane { role, data }),
        }
        Ok(self)
    }
}

/// Linear full-range 16→8-bit conversion, `round(v * 255 / 65535)`.
pub fn to_8bit(plane16: &[u16]) -> Vec<u8> {
    // v * 255 / 65535 == v / 257; halfway cases cannot occur.
    plane16.iter().map(|&v| ((v as u32 + 128) / 257) as u8).collect()
}

/// Role → plane index within the decoded file (planes are numbered across
/// pages first, then samples within a page).
pub type ChannelMap = [(ChannelRole, usize)];

/// Loads a TIFF or PNG raster and assigns planes to roles.
pub fn load_slide(path: &Path, channel_map: &ChannelMap, pixel_size_um: f64) -> Result<SlideImage> {
    let planes = read_planes(path)?;
    let slide_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    assemble(slide_id, planes, channel_map, pixel_size_um)
}

fn assemble(
    slide_id: String,
    planes: Vec<Plane>,
    channel_map: &ChannelMap,
    pixel_size_um: f64,
) -> Result<SlideImage> {
    let mut channels = Vec::with_capacity(channel_map.len());
    for (i, &(role, index)) in channel_map.iter().enumerate() {
        if channel_map[..i].iter().any(|&(r, _)| r == role) {
            return Err(GandaError::DuplicateRole(role));
        }
        let data = planes.get(index).ok_or(GandaError::PlaneCountMismatch {
            requested: index,
            found: planes.len(),
        })?;
        channels.push(ChannelPlane {
            role,
            data: data.clone(),
        });
    }
    SlideImage::new(slide_id, pixel_size_um, channels)
}

/// Decodes every plane of a TIFF (all pages, all samples) or PNG file.
pub fn read_planes(path: &Path) -> Result<Vec<Plane>> {
    if !path.exists() {
        return Err(GandaError::MissingFile(path.to_path_buf()));
    }
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "tif" | "tiff" => read_tiff_planes(path),
        _ => read_png_planes(path),
    }
}

fn split_samples(width: usize, height: usize, samples: usize, data: Vec<u8>) -> Result<Vec<Plane>> {
    if samples == 1 {
        return Ok(vec![Plane::from_vec(width, height, data)?]);
    }
    (0..samples)
        .map(|s| Plane::from_vec(width, height, data.iter().skip(s).step_by(samples).copied().collect()))
        .collect()
}

fn read_tiff_planes(path: &Path) -> Result<Vec<Plane>> {
    use tiff::decoder::{Decoder, DecodingResult};
    use tiff::ColorType;

    let file = File::open(path).map_err(|e| GandaError::io(path, e))?;
    let mut decoder = Decoder::new(BufReader::new(file)).map_err(|e| GandaError::codec(path, e))?;
    let mut planes = Vec::new();
    loop {
        let (w, h) = decoder.dimensions().map_err(|e| GandaError::codec(path, e))?;
        let colortype = decoder.colortype().map_err(|e| GandaError::codec(path, e))?;
        let (bits, samples) = match colortype {
            ColorType::Gray(b) => (b, 1),
            ColorType::GrayA(b) => (b, 2),
            ColorType::RGB(b) => (b, 3),
            ColorType::RGBA(b) => (b, 4),
            ColorType::Multiband {
                bit_depth,
                num_samples,
            } => (bit_depth, num_samples as usize),
            other => {
                return Err(GandaError::codec(path, format!("unsupported TIFF color type {other:?}")))
            }
        };
        if bits > 16 {
            return Err(GandaError::UnsupportedBitDepth(bits as u16));
        }
        let data = match decoder.read_image().map_err(|e| GandaError::codec(path, e))? {
            DecodingResult::U8(v) => v,
            DecodingResult::U16(v) => to_8bit(&v),
            _ => return Err(GandaError::UnsupportedBitDepth(bits as u16)),
        };
        planes.extend(split_samples(w as usize, h as usize, samples, data)?);
        if !decoder.more_images() {
            break;
        }
        decoder.next_image().map_err(|e| GandaError::codec(path, e))?;
    }
    Ok(planes)
}

fn read_png_planes(path: &Path) -> Result<Vec<Plane>> {
    use image::DynamicImage;

    let img = image::open(path).map_err(|e| GandaError::codec(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(b) => split_samples(w, h, 1, b.into_raw()),
        DynamicImage::ImageLumaA8(b) => split_samples(w, h, 2, b.into_raw()),
        DynamicImage::ImageRgb8(b) => split_samples(w, h, 3, b.into_raw()),
        DynamicImage::ImageRgba8(b) => split_samples(w, h, 4, b.into_raw()),
        DynamicImage::ImageLuma16(b) => split_samples(w, h, 1, to_8bit(&b.into_raw())),
        DynamicImage::ImageLumaA16(b) => split_samples(w, h, 2, to_8bit(&b.into_raw())),
        DynamicImage::ImageRgb16(b) => split_samples(w, h, 3, to_8bit(&b.into_raw())),
        DynamicImage::ImageRgba16(b) => split_samples(w, h, 4, to_8bit(&b.into_raw())),
        _ => Err(GandaError::UnsupportedBitDepth(32)),
    }
}

/// JSON sidecar describing a slide stored as separate channel files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideManifest {
    pub slide_id: String,
    #[serde(default = "default_pixel_size")]
    pub pixel_size_um: f64,
    /// Shared multi-plane image for entries that give only a plane index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub channels: Vec<ChannelEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelEntry {
    pub role: ChannelRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane_index: Option<usize>,
}

fn default_pixel_size() -> f64 {
    1.0
}

/// Loads a slide from its JSON sidecar. Relative file names resolve against
/// the sidecar's directory.
pub fn load_slide_manifest(path: &Path) -> Result<SlideImage> {
    if !path.exists() {
        return Err(GandaError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| GandaError::io(path, e))?;
    let manifest: SlideManifest = serde_json::from_str(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut channels = Vec::with_capacity(manifest.channels.len());
    let mut shared: Option<Vec<Plane>> = None;
    for entry in &manifest.channels {
        let (file, index) = match (&entry.file, &manifest.image) {
            (Some(f), _) => (f.clone(), entry.plane_index.unwrap_or(0)),
            (None, Some(img)) => (img.clone(), entry.plane_index.unwrap_or(0)),
            (None, None) => {
                return Err(GandaError::InvalidConfig(format!(
                    "channel {:?} names neither a file nor a shared image",
                    entry.role
                )))
            }
        };
        let planes = if entry.file.is_none() {
            if shared.is_none() {
                shared = Some(read_planes(&dir.join(&file))?);
            }
            shared.clone().unwrap_or_default()
        } else {
            read_planes(&dir.join(&file))?
        };
        let data = planes.get(index).ok_or(GandaError::PlaneCountMismatch {
            requested: index,
            found: planes.len(),
        })?;
        channels.push(ChannelPlane {
            role: entry.role,
            data: data.clone(),
        });
    }
    SlideImage::new(manifest.slide_id, manifest.pixel_size_um, channels)
}

/// Loads either a sidecar (`.json`) or a raster file using `channel_map`.
pub fn load_any(path: &Path, channel_map: &ChannelMap, pixel_size_um: f64) -> Result<SlideImage> {
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        load_slide_manifest(path)
    } else {
        load_slide(path, channel_map, pixel_size_um)
    }
}

/// File name used for a channel PNG written next to a sidecar.
pub fn channel_file_name(stem: &str, role: ChannelRole) -> String {
    format!("{stem}_{}.png", role.as_str())
}

/// Persists `slide` as a JSON sidecar at `path` plus one grayscale PNG per
/// channel in the same directory.
pub fn save_slide(slide: &SlideImage, path: &Path) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| slide.slide_id.clone());
    let mut entries = Vec::with_capacity(slide.channels.len());
    for c in &slide.channels {
        let name = channel_file_name(&stem, c.role);
        write_gray_png(&dir.join(&name), &c.data)?;
        entries.push(ChannelEntry {
            role: c.role,
            file: Some(name),
            plane_index: None,
        });
    }
    let manifest = SlideManifest {
        slide_id: slide.slide_id.clone(),
        pixel_size_um: slide.pixel_size_um,
        image: None,
        channels: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json).map_err(|e| GandaError::io(path, e))
}

/// Writes one channel per page as an 8-bit grayscale multi-page TIFF, in
/// channel order.
pub fn save_slide_tiff(slide: &SlideImage, path: &Path) -> Result<()> {
    use tiff::encoder::{colortype, TiffEncoder};

    let file = File::create(path).map_err(|e| GandaError::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| GandaError::codec(path, e))?;
    for c in &slide.channels {
        enc.write_image::<colortype::Gray8>(
            slide.width_px as u32,
            slide.height_px as u32,
            c.data.as_slice(),
        )
        .map_err(|e| GandaError::codec(path, e))?;
    }
    Ok(())
}

pub fn write_gray_png(path: &Path, plane: &Plane) -> Result<()> {
    let buf = image::GrayImage::from_raw(
        plane.width() as u32,
        plane.height() as u32,
        plane.as_slice().to_vec(),
    )
    .ok_or_else(|| GandaError::ShapeMismatch("plane buffer size".into()))?;
    let file = File::create(path).map_err(|e| GandaError::io(path, e))?;
    buf.write_to(&mut BufWriter::new(file), image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => GandaError::io(path, io),
            other => GandaError::codec(path, other),
        })
}

pub fn read_gray_png(path: &Path) -> Result<Plane> {
    let mut planes = read_planes(path)?;
    if planes.len() != 1 {
        return Err(GandaError::PlaneCountMismatch {
            requested: 0,
            found: planes.len(),
        });
    }
    Ok(planes.remove(0))
}

/// Resolves the sidecar path that [`save_slide`] would use inside `dir`.
pub fn sidecar_path(dir: &Path, slide_id: &str) -> PathBuf {
    dir.join(format!("{slide_id}.json"))
}
