//! The concatenated "single large image": panel layouts, tiling panels into a
//! canvas and splitting it back, panel masks, and 8-bit PNG I/O.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const DEFAULT_PANEL: usize = 32;

/// Position marker of one panel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Marker {
    #[serde(rename = "TOP-LEFT")]
    TopLeft,
    #[serde(rename = "TOP-RIGHT")]
    TopRight,
    #[serde(rename = "BOTTOM-LEFT")]
    BottomLeft,
    #[serde(rename = "BOTTOM-RIGHT")]
    BottomRight,
    #[serde(rename = "LEFT")]
    Left,
    #[serde(rename = "RIGHT")]
    Right,
    #[serde(rename = "TOP")]
    Top,
    #[serde(rename = "BOTTOM")]
    Bottom,
    #[serde(rename = "SINGLE")]
    Single,
}

impl Marker {
    pub const ALL: [Marker; 9] = [
        Marker::TopLeft,
        Marker::TopRight,
        Marker::BottomLeft,
        Marker::BottomRight,
        Marker::Left,
        Marker::Right,
        Marker::Top,
        Marker::Bottom,
        Marker::Single,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Marker::TopLeft => "TOP-LEFT",
            Marker::TopRight => "TOP-RIGHT",
            Marker::BottomLeft => "BOTTOM-LEFT",
            Marker::BottomRight => "BOTTOM-RIGHT",
            Marker::Left => "LEFT",
            Marker::Right => "RIGHT",
            Marker::Top => "TOP",
            Marker::Bottom => "BOTTOM",
            Marker::Single => "SINGLE",
        }
    }

    fn short(self) -> &'static str {
        match self {
            Marker::TopLeft => "TL",
            Marker::TopRight => "TR",
            Marker::BottomLeft => "BL",
            Marker::BottomRight => "BR",
            Marker::Left => "L",
            Marker::Right => "R",
            Marker::Top => "T",
            Marker::Bottom => "B",
            Marker::Single => "S",
        }
    }
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Marker {
    type Err = Error;

    /// Accepts full names (`TOP-LEFT`, `[TOP-LEFT]`) and abbreviations (`TL`).
    fn from_str(s: &str) -> Result<Self> {
        let t = s
            .trim()
            .trim_start_matches('[')
            .trim_end_matches(']')
            .to_ascii_uppercase();
        Marker::ALL
            .into_iter()
            .find(|m| m.as_str() == t || m.short() == t)
            .ok_or_else(|| Error::UnknownMarker(s.to_string()))
    }
}

/// Grid geometry of a panel set. Markers run in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PanelLayout {
    rows: usize,
    cols: usize,
    panel_h: usize,
    panel_w: usize,
    markers: Vec<Marker>,
}

impl PanelLayout {
    /// One of the supported grids: 1×1, 1×2, 2×1, 2×2.
    pub fn new(rows: usize, cols: usize, panel_h: usize, panel_w: usize) -> Result<Self> {
        use Marker::*;
        let markers = match (rows, cols) {
            (1, 1) => vec![Single],
            (1, 2) => vec![Left, Right],
            (2, 1) => vec![Top, Bottom],
            (2, 2) => vec![TopLeft, TopRight, BottomLeft, BottomRight],
            _ => {
                return Err(Error::Invalid(format!("unsupported layout {rows}x{cols}")));
            }
        };
        if panel_h == 0 || panel_w == 0 {
            return Err(Error::Invalid("panel extents must be positive".into()));
        }
        Ok(Self {
            rows,
            cols,
            panel_h,
            panel_w,
            markers,
        })
    }

    /// `rows x cols` with the default 32×32 panel.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, DEFAULT_PANEL, DEFAULT_PANEL)
    }

    /// Parses `"2x2"` (default panel size) or `"2x2@32x32"`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("bad layout {s:?}, expected e.g. 2x2 or 2x2@32x32"));
        let (grid, panel) = match s.split_once('@') {
            Some((g, p)) => (g, Some(p)),
            None => (s, None),
        };
        let pair = |t: &str| -> Result<(usize, usize)> {
            let (a, b) = t.split_once(['x', 'X']).ok_or_else(bad)?;
            Ok((
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ))
        };
        let (r, c) = pair(grid)?;
        let (ph, pw) = match panel {
            Some(p) => pair(p)?,
            None => (DEFAULT_PANEL, DEFAULT_PANEL),
        };
        Self::new(r, c, ph, pw)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn panel_h(&self) -> usize {
        self.panel_h
    }

    pub fn panel_w(&self) -> usize {
        self.panel_w
    }

    pub fn markers(&self) -> &[Marker] {
        &self.markers
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    pub fn height(&self) -> usize {
        self.rows * self.panel_h
    }

    pub fn width(&self) -> usize {
        self.cols * self.panel_w
    }

    pub fn index_of(&self, m: Marker) -> Option<usize> {
        self.markers.iter().position(|&x| x == m)
    }

    /// Top-left pixel of panel `i`.
    pub fn origin(&self, i: usize) -> (usize, usize) {
        ((i / self.cols) * self.panel_h, (i % self.cols) * self.panel_w)
    }

    /// `"2x2"` form used in manifests.
    pub fn name(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

impl fmt::Display for PanelLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}@{}x{}", self.rows, self.cols, self.panel_h, self.panel_w)
    }
}

/// RGB image with values in `[-1, 1]`, stored channel-major `[3, H, W]`.
///
/// Used both for whole canvases and for individual panels.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    height: usize,
    width: usize,
    pixels: Tensor<f32>,
}

impl Canvas {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Invalid("canvas values must lie in [-1, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            pixels: Tensor::new(vec![CHANNELS, height, width], data)?,
        })
    }

    /// Clamps every value into `[-1, 1]` (NaN becomes 0).
    pub fn from_clamped(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) })
            .collect();
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v.clamp(-1.0, 1.0), height * width));
        }
        Self::new(height, width, data).expect("clamped fill")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn data(&self) -> &[f32] {
        self.pixels.data()
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels.data()[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let (h, w) = (self.height, self.width);
        self.pixels.data_mut()[(c * h + y) * w + x] = v.clamp(-1.0, 1.0);
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// Interleaved 8-bit RGB, `p = round((v + 1)/2 · 255)` with halves away from zero.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.height * self.width * CHANNELS);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.push(to_u8(self.get(c, y, x)));
                }
            }
        }
        out
    }

    /// Inverse of [`Canvas::to_rgb8`]: `v = 2·(p/255) − 1`.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * CHANNELS {
            return Err(Error::Dimension(format!(
                "{} bytes for a {}x{} RGB image",
                bytes.len(),
                height,
                width
            )));
        }
        let mut data = vec![0f32; bytes.len()];
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data[(c * height + y) * width + x] = from_u8(bytes[(y * width + x) * CHANNELS + c]);
                }
            }
        }
        Self::new(height, width, data)
    }

    /// Round-trips through 8-bit, as a PNG save/load would.
    pub fn quantized(&self) -> Canvas {
        Canvas::from_rgb8(self.height, self.width, &self.to_rgb8()).expect("same dims")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Png {
            path: path.to_path_buf(),
            detail: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&self.to_rgb8()).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }

    /// Loads an 8-bit RGB or RGBA PNG (alpha is dropped).
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let png_err = |d: String| Error::Png {
            path: path.to_path_buf(),
            detail: d,
        };
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
        let mut buf = vec![
            0;
            reader
                .output_buffer_size()
                .ok_or_else(|| png_err("image too large".into()))?
        ];
        let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(png_err(format!("unsupported bit depth {:?}", info.bit_depth)));
        }
        let (h, w) = (info.height as usize, info.width as usize);
        let bytes = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => bytes.to_vec(),
            png::ColorType::Rgba => bytes.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            other => return Err(png_err(format!("unsupported color type {other:?}"))),
        };
        Self::from_rgb8(h, w, &rgb)
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

#[inline]
pub fn from_u8(p: u8) -> f32 {
    2.0 * (p as f32 / 255.0) - 1.0
}

/// Tiles panels row-major into one canvas; panel `i` occupies cell `i`.
pub fn compose(panels: &[Canvas], layout: &PanelLayout) -> Result<Canvas> {
    if panels.len() != layout.len() {
        return Err(Error::Dimension(format!(
            "{} panels for a {} layout",
            panels.len(),
            layout.name()
        )));
    }
    let (ph, pw) = (layout.panel_h, layout.panel_w);
    let (h, w) = (layout.height(), layout.width());
    let mut data = vec![0f32; CHANNELS * h * w];
    for (i, p) in panels.iter().enumerate() {
        if p.height != ph || p.width != pw {
            return Err(Error::Dimension(format!(
                "panel {} is {}x{}, layout wants {}x{}",
                i, p.height, p.width, ph, pw
            )));
        }
        let (oy, ox) = layout.origin(i);
        for c in 0..CHANNELS {
            for y in 0..ph {
                let src = &p.data()[(c * ph + y) * pw..(c * ph + y + 1) * pw];
                let dst = (c * h + oy + y) * w + ox;
                data[dst..dst + pw].copy_from_slice(src);
            }
        }
    }
    Canvas::new(h, w, data)
}

/// Exact inverse of [`compose`].
pub fn split(canvas: &Canvas, layout: &PanelLayout) -> Result<Vec<Canvas>> {
    if canvas.height != layout.height() || canvas.width != layout.width() {
        return Err(Error::Dimension(format!(
            "canvas {}x{} does not match layout {} ({}x{})",
            canvas.height,
            canvas.width,
            layout,
            layout.height(),
            layout.width()
        )));
    }
    let (ph, pw) = (layout.panel_h, layout.panel_w);
    let (h, w) = (canvas.height, canvas.width);
    (0..layout.len())
        .map(|i| {
            let (oy, ox) = layout.origin(i);
            let mut data = Vec::with_capacity(CHANNELS * ph * pw);
            for c in 0..CHANNELS {
                for y in 0..ph {
                    let s = (c * h + oy + y) * w + ox;
                    data.extend_from_slice(&canvas.data()[s..s + pw]);
                }
            }
            Canvas::new(ph, pw, data)
        })
        .collect()
}

/// A set of panels within a layout (for inpainting: the panels to generate).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanelMask {
    layout: PanelLayout,
    masked: BTreeSet<Marker>,
}

impl PanelMask {
    pub fn new(layout: PanelLayout, masked: impl IntoIterator<Item = Marker>) -> Result<Self> {
        let masked: BTreeSet<Marker> = masked.into_iter().collect();
        if let Some(m) = masked.iter().find(|m| layout.index_of(**m).is_none()) {
            return Err(Error::UnknownMarker(m.as_str().to_string()));
        }
        Ok(Self { layout, masked })
    }

    /// Parses a comma-separated marker list such as `"TL,TR"`.
    pub fn parse(layout: PanelLayout, list: &str) -> Result<Self> {
        let markers = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(Marker::from_str)
            .collect::<Result<Vec<_>>>()?;
        Self::new(layout, markers)
    }

    pub fn all(layout: PanelLayout) -> Self {
        let masked = layout.markers.iter().copied().collect();
        Self { layout, masked }
    }

    pub fn layout(&self) -> &PanelLayout {
        &self.layout
    }

    pub fn masked(&self) -> &BTreeSet<Marker> {
        &self.masked
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains_panel(&self, i: usize) -> bool {
        self.masked.contains(&self.layout.markers[i])
    }

    /// The same layout with the complementary marker set.
    pub fn complement(&self) -> Self {
        let masked = self
            .layout
            .markers
            .iter()
            .copied()
            .filter(|m| !self.masked.contains(m))
            .collect();
        Self {
            layout: self.layout.clone(),
            masked,
        }
    }
}

/// Boolean field over canvas values (`[3, H, W]`), true on masked panels.
pub fn mask_region(mask: &PanelMask) -> Vec<bool> {
    let l = &mask.layout;
    let (h, w) = (l.height(), l.width());
    let mut out = vec![false; CHANNELS * h * w];
    for i in (0..l.len()).filter(|&i| mask.contains_panel(i)) {
        let (oy, ox) = l.origin(i);
        for c in 0..CHANNELS {
            for y in oy..oy + l.panel_h {
                let s = (c * h + y) * w + ox;
                out[s..s + l.panel_w].iter_mut().for_each(|b| *b = true);
            }
        }
    }
    out
}
