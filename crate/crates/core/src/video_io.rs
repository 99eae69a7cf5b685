//! Clip loading, the packed `dzlv` clip format, binary PGM frames, and
//! resizing.
//!
//! Everything downstream works on grayscale intensities in `[0, 1]`.
//! 8-bit samples are normalized by 255 on the way in and quantized back
//! with round-to-nearest on the way out, so an 8-bit file survives a
//! decode/encode round trip byte for byte.
//!
//! `dzlv` layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "DZLV"
//! version u32      1
//! width   u32
//! height  u32
//! frames  u32
//! data    frames * width * height bytes, frame-major, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Parsers refuse dimensions past this; a hostile header must not pick
/// the allocation size.
const MAX_DIM: u32 = 16_384;
const MAX_FRAMES: u32 = 1 << 20;

pub const MIN_DIM: usize = 8;
pub const MIN_FRAMES: usize = 4;

/// One grayscale frame, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width < MIN_DIM || height < MIN_DIM {
            return Err(Error::InvalidParam(format!(
                "frame dims {width}x{height} below minimum {MIN_DIM}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Mismatch(format!(
                "frame data length {} != {width}x{height}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParam(
                "frame intensities must be finite and in [0,1]".into(),
            ));
        }
        Ok(Frame {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Frame::new(width, height, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// A clip: at least [`MIN_FRAMES`] frames, all the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if frames.len() < MIN_FRAMES {
            return Err(Error::InvalidParam(format!(
                "clip has {} frames, minimum is {MIN_FRAMES}",
                frames.len()
            )));
        }
        let (w, h) = (frames[0].width(), frames[0].height());
        for (i, f) in frames.iter().enumerate() {
            if f.width() != w || f.height() != h {
                return Err(Error::Mismatch(format!(
                    "frame {i} is {}x{}, expected {w}x{h}",
                    f.width(),
                    f.height()
                )));
            }
        }
        Ok(VideoClip { frames })
    }

    #[inline]
    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    /// Frames reordered by `order`: output position `t` takes `frames[order[t]]`.
    pub fn reordered(&self, order: &[usize]) -> Result<VideoClip> {
        if order.len() != self.len() {
            return Err(Error::Mismatch(format!(
                "order length {} != frame count {}",
                order.len(),
                self.len()
            )));
        }
        let frames = order.iter().map(|&i| self.frames[i].clone()).collect();
        VideoClip::new(frames)
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

// ---------------------------------------------------------------- PGM --

/// Decode a binary (P5) PGM. 8-bit only: maxval above 255 is rejected.
/// Header tokens may be separated by whitespace runs and `#` comments;
/// exactly one whitespace byte separates the maxval from the raster.
pub fn decode_pgm(bytes: &[u8]) -> Result<Frame> {
    let mut pos = 0usize;

    fn skip_space(bytes: &[u8], mut pos: usize) -> usize {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                return pos;
            }
        }
    }

    fn token(bytes: &[u8], pos: usize) -> Result<(u32, usize)> {
        let start = skip_space(bytes, pos);
        let mut end = start;
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
        if end == start {
            return Err(Error::Format("expected integer in pgm header".into()));
        }
        let s = std::str::from_utf8(&bytes[start..end]).expect("digits are utf8");
        let v: u32 = s
            .parse()
            .map_err(|_| Error::Format("pgm header integer out of range".into()))?;
        Ok((v, end))
    }

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::Format("not a binary pgm: missing P5 magic".into()));
    }
    pos += 2;

    let (width, p) = token(bytes, pos)?;
    let (height, p) = token(bytes, p)?;
    let (maxval, p) = token(bytes, p)?;
    pos = p;

    if width < MIN_DIM as u32 || height < MIN_DIM as u32 || width > MAX_DIM || height > MAX_DIM {
        return Err(Error::Format(format!(
            "pgm dims {width}x{height} outside [{MIN_DIM}, {MAX_DIM}]"
        )));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "pgm maxval {maxval} unsupported, want 1..=255"
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing whitespace before pgm raster".into()));
    }
    pos += 1;

    let expect = width as usize * height as usize;
    let raster = &bytes[pos..];
    if raster.len() < expect {
        return Err(Error::Format(format!(
            "pgm raster truncated: have {}, want {expect}",
            raster.len()
        )));
    }
    if raster.len() > expect {
        return Err(Error::Format(format!(
            "pgm raster has {} trailing bytes",
            raster.len() - expect
        )));
    }
    let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Frame::new(width as usize, height as usize, data)
}

/// Encode a frame as binary PGM with maxval 255.
pub fn encode_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.data().iter().map(|&v| quantize(v)));
    out
}

pub fn load_pgm(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn save_pgm(path: &Path, frame: &Frame) -> Result<()> {
    fs::write(path, encode_pgm(frame)).map_err(|e| Error::io(path, e))
}

/// Load a clip from a directory of `.pgm` frames, lexicographic filename
/// order. All frames must share dimensions.
pub fn load_pgm_dir(dir: &Path) -> Result<VideoClip> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("pgm"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if paths.len() < MIN_FRAMES {
        return Err(Error::InvalidParam(format!(
            "{} pgm frames in {}, minimum is {MIN_FRAMES}",
            paths.len(),
            dir.display()
        )));
    }
    let frames = paths
        .iter()
        .map(|p| load_pgm(p))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(frames)
}

// --------------------------------------------------------------- dzlv --

const DZLV_MAGIC: &[u8; 4] = b"DZLV";
const DZLV_VERSION: u32 = 1;

fn read_u32(bytes: &[u8], pos: usize) -> Result<u32> {
    let s: [u8; 4] = bytes
        .get(pos..pos + 4)
        .ok_or_else(|| Error::Format("dzlv header truncated".into()))?
        .try_into()
        .unwrap();
    Ok(u32::from_le_bytes(s))
}

/// Decode a `dzlv` byte stream. The payload length must match the header
/// exactly; length is checked before anything is allocated.
pub fn decode_dzlv(bytes: &[u8]) -> Result<VideoClip> {
    if bytes.len() < 4 || &bytes[0..4] != DZLV_MAGIC {
        return Err(Error::Format("missing DZLV magic".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != DZLV_VERSION {
        return Err(Error::Format(format!(
            "dzlv version {version}, expected {DZLV_VERSION}"
        )));
    }
    let width = read_u32(bytes, 8)?;
    let height = read_u32(bytes, 12)?;
    let frames = read_u32(bytes, 16)?;
    if width < MIN_DIM as u32 || height < MIN_DIM as u32 || width > MAX_DIM || height > MAX_DIM {
        return Err(Error::Format(format!(
            "dzlv dims {width}x{height} outside [{MIN_DIM}, {MAX_DIM}]"
        )));
    }
    if frames < MIN_FRAMES as u32 || frames > MAX_FRAMES {
        return Err(Error::Format(format!(
            "dzlv frame count {frames} outside [{MIN_FRAMES}, {MAX_FRAMES}]"
        )));
    }
    let frame_len = width as u64 * height as u64;
    let expect = frame_len * frames as u64;
    let payload = &bytes[20..];
    if (payload.len() as u64) < expect {
        return Err(Error::Format(format!(
            "dzlv payload truncated: have {}, want {expect}",
            payload.len()
        )));
    }
    if payload.len() as u64 > expect {
        return Err(Error::Format(format!(
            "dzlv payload has {} trailing bytes",
            payload.len() as u64 - expect
        )));
    }
    let frame_len = frame_len as usize;
    let out = (0..frames as usize)
        .map(|t| {
            let chunk = &payload[t * frame_len..(t + 1) * frame_len];
            let data = chunk.iter().map(|&b| b as f64 / 255.0).collect();
            Frame::new(width as usize, height as usize, data)
        })
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(out)
}

pub fn encode_dzlv(clip: &VideoClip) -> Vec<u8> {
    let (w, h, t) = (clip.width(), clip.height(), clip.len());
    let mut out = Vec::with_capacity(20 + w * h * t);
    out.extend_from_slice(DZLV_MAGIC);
    out.extend_from_slice(&DZLV_VERSION.to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    for frame in clip.frames() {
        out.extend(frame.data().iter().map(|&v| quantize(v)));
    }
    out
}

pub fn load_dzlv(path: &Path) -> Result<VideoClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dzlv(&bytes)
}

pub fn save_dzlv(path: &Path, clip: &VideoClip) -> Result<()> {
    fs::write(path, encode_dzlv(clip)).map_err(|e| Error::io(path, e))
}

/// Load a clip from either a `.dzlv` file or a directory of PGM frames,
/// decided by what the path points at.
pub fn load_clip(path: &Path) -> Result<VideoClip> {
    if path.is_dir() {
        load_pgm_dir(path)
    } else {
        load_dzlv(path)
    }
}

// ------------------------------------------------------------- resize --

/// Bilinear sample of a row-major buffer at fractional coordinates.
/// Coordinates are clamped to the valid rectangle.
#[inline]
pub(crate) fn bilinear(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = data[y0 * width + x0] * (1.0 - fx) + data[y0 * width + x1] * fx;
    let bot = data[y1 * width + x0] * (1.0 - fx) + data[y1 * width + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Resample a raw buffer to a new size. Corner-aligned: output corners
/// sample input corners exactly, so resizing to the same size is the
/// identity and a linear ramp stays a linear ramp.
pub(crate) fn resample(
    data: &[f64],
    width: usize,
    height: usize,
    new_w: usize,
    new_h: usize,
) -> Vec<f64> {
    let sx = if new_w > 1 {
        (width - 1) as f64 / (new_w - 1) as f64
    } else {
        0.0
    };
    let sy = if new_h > 1 {
        (height - 1) as f64 / (new_h - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        let src_y = y as f64 * sy;
        for x in 0..new_w {
            out.push(bilinear(data, width, height, x as f64 * sx, src_y));
        }
    }
    out
}

/// Bilinear resize with corner alignment.
pub fn resize_frame(frame: &Frame, new_w: usize, new_h: usize) -> Result<Frame> {
    if new_w < MIN_DIM || new_h < MIN_DIM {
        return Err(Error::InvalidParam(format!(
            "resize target {new_w}x{new_h} below minimum {MIN_DIM}"
        )));
    }
    if new_w == frame.width() && new_h == frame.height() {
        return Ok(frame.clone());
    }
    let data = resample(frame.data(), frame.width(), frame.height(), new_w, new_h);
    Frame::new(new_w, new_h, data)
}

pub fn resize_clip(clip: &VideoClip, new_w: usize, new_h: usize) -> Result<VideoClip> {
    if new_w == clip.width() && new_h == clip.height() {
        return Ok(clip.clone());
    }
    let frames = clip
        .frames()
        .iter()
        .map(|f| resize_frame(f, new_w, new_h))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(frames)
}
