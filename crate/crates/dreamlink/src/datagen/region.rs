//! Region proposals: mapping an instruction plus an image to a soft mask
//! saying where the edit should apply.
//!
//! The builtin proposer is a color/shape grounding heuristic matched to the
//! procedural scene family: it estimates the background color, finds
//! connected off-background blobs, classifies their shape by bounding-box
//! fill ratio, and selects the blob (or complement) the instruction refers
//! to. An external proposer can be plugged in over HTTP; failures fall back
//! to the builtin path with a warning.

use super::grammar::{parse_instruction, ParsedInstruction};
use super::scenes::Shape;
use crate::config::RegionMode;
use crate::grid::{ImageGrid, RegionMask};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

/// L1 color distance below which a pixel counts as background.
const BG_THRESHOLD: f64 = 0.19;
/// Blobs smaller than this many pixels are treated as noise.
const MIN_BLOB_PIXELS: usize = 8;

/// A proposed region with provenance notes.
#[derive(Debug, Clone)]
pub struct RegionProposal {
    pub mask: RegionMask,
    /// Phrase the proposer grounded (external proposers may supply one).
    pub phrase: Option<String>,
    /// Non-fatal problems encountered (fallbacks, parse failures).
    pub warnings: Vec<String>,
}

fn all_ones(h: usize, w: usize) -> RegionMask {
    RegionMask::new(ArrayD::from_elem(IxDyn(&[h, w]), 1.0)).expect("ones mask")
}

/// Most common exact pixel color bucket, averaged: the background estimate.
fn estimate_background(image: &ImageGrid) -> [f64; 3] {
    let (h, w) = (image.height(), image.width());
    let mut counts: std::collections::HashMap<[u8; 3], (usize, [f64; 3])> =
        std::collections::HashMap::new();
    for y in 0..h {
        for x in 0..w {
            let px = [
                image.data[[0, y, x]],
                image.data[[1, y, x]],
                image.data[[2, y, x]],
            ];
            let key = [
                (px[0].clamp(0.0, 1.0) * 7.999) as u8,
                (px[1].clamp(0.0, 1.0) * 7.999) as u8,
                (px[2].clamp(0.0, 1.0) * 7.999) as u8,
            ];
            let e = counts.entry(key).or_insert((0, [0.0; 3]));
            e.0 += 1;
            for c in 0..3 {
                e.1[c] += px[c];
            }
        }
    }
    let (_, (n, sum)) = counts
        .into_iter()
        .max_by(|a, b| {
            a.1 .0
                .cmp(&b.1 .0)
                .then_with(|| a.0.cmp(&b.0)) // deterministic tie-break
        })
        .expect("image has pixels");
    [sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64]
}

/// Binary matrix of pixels that are far from the background color.
fn foreground(image: &ImageGrid, bg: [f64; 3]) -> Vec<Vec<bool>> {
    let (h, w) = (image.height(), image.width());
    let mut fg = vec![vec![false; w]; h];
    for (y, row) in fg.iter_mut().enumerate() {
        for (x, cell) in row.iter_mut().enumerate() {
            let d = (image.data[[0, y, x]] - bg[0]).abs()
                + (image.data[[1, y, x]] - bg[1]).abs()
                + (image.data[[2, y, x]] - bg[2]).abs();
            *cell = d > BG_THRESHOLD;
        }
    }
    fg
}

#[derive(Debug)]
struct Blob {
    pixels: Vec<(usize, usize)>,
    bbox: (usize, usize, usize, usize), // y0, y1, x0, x1 inclusive
}

/// Area of the convex hull of a point set (Andrew monotone chain + shoelace).
fn convex_hull_area(points: &mut Vec<(f64, f64)>) -> f64 {
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();
    if points.len() < 3 {
        return 0.0;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in points.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in points.iter().rev() {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    let mut area = 0.0;
    for i in 0..hull.len() {
        let (x1, y1) = hull[i];
        let (x2, y2) = hull[(i + 1) % hull.len()];
        area += x1 * y2 - x2 * y1;
    }
    area.abs() / 2.0
}

impl Blob {
    fn fill_ratio(&self) -> f64 {
        let (y0, y1, x0, x1) = self.bbox;
        let area = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        self.pixels.len() as f64 / area
    }

    /// Blob area over convex-hull area: near 1 for convex shapes, well
    /// below for star points.
    fn convexity(&self) -> f64 {
        let mut corners: Vec<(f64, f64)> = Vec::with_capacity(self.pixels.len() * 4);
        for &(y, x) in &self.pixels {
            let (xf, yf) = (x as f64, y as f64);
            corners.push((xf, yf));
            corners.push((xf + 1.0, yf));
            corners.push((xf, yf + 1.0));
            corners.push((xf + 1.0, yf + 1.0));
        }
        let hull = convex_hull_area(&mut corners);
        if hull <= 0.0 {
            1.0
        } else {
            self.pixels.len() as f64 / hull
        }
    }

    fn classify(&self) -> Option<Shape> {
        if self.convexity() < 0.82 {
            return Some(Shape::Star);
        }
        let r = self.fill_ratio();
        if r >= 0.93 {
            Some(Shape::Square)
        } else if r >= 0.66 {
            Some(Shape::Circle)
        } else if r > 0.30 {
            Some(Shape::Triangle)
        } else {
            None
        }
    }
}

/// Classify a 4-connected pixel blob as one of the scene shapes, using
/// bounding-box fill ratio plus convexity. Shared by tests that validate
/// renderer and proposer agree.
pub fn classify_pixel_blob(pixels: &[(usize, usize)]) -> Option<Shape> {
    if pixels.is_empty() {
        return None;
    }
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for &(y, x) in pixels {
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    Blob {
        pixels: pixels.to_vec(),
        bbox: (y0, y1, x0, x1),
    }
    .classify()
}

/// 4-connected components of the foreground, small specks dropped.
fn find_blobs(fg: &[Vec<bool>]) -> Vec<Blob> {
    let h = fg.len();
    let w = if h > 0 { fg[0].len() } else { 0 };
    let mut seen = vec![vec![false; w]; h];
    let mut blobs = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if fg[sy][sx] && !seen[sy][sx] {
                let mut pixels = Vec::new();
                let mut stack = vec![(sy, sx)];
                seen[sy][sx] = true;
                let (mut y0, mut y1, mut x0, mut x1) = (sy, sy, sx, sx);
                while let Some((y, x)) = stack.pop() {
                    pixels.push((y, x));
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    let mut push = |ny: usize, nx: usize| {
                        if fg[ny][nx] && !seen[ny][nx] {
                            seen[ny][nx] = true;
                            stack.push((ny, nx));
                        }
                    };
                    if y > 0 {
                        push(y - 1, x);
                    }
                    if y + 1 < h {
                        push(y + 1, x);
                    }
                    if x > 0 {
                        push(y, x - 1);
                    }
                    if x + 1 < w {
                        push(y, x + 1);
                    }
                }
                if pixels.len() >= MIN_BLOB_PIXELS {
                    blobs.push(Blob {
                        pixels,
                        bbox: (y0, y1, x0, x1),
                    });
                }
            }
        }
    }
    blobs
}

fn mask_from_pixels(h: usize, w: usize, pixels: &[(usize, usize)]) -> RegionMask {
    let mut m = ArrayD::zeros(IxDyn(&[h, w]));
    for &(y, x) in pixels {
        m[[y, x]] = 1.0;
    }
    RegionMask::new(m).expect("binary mask")
}

fn complement(mask: &RegionMask) -> RegionMask {
    RegionMask::new(mask.data.mapv(|v| 1.0 - v)).expect("complement")
}

/// Builtin grounding heuristic at the image's own resolution.
pub fn builtin_propose(instruction: &str, image: &ImageGrid) -> RegionProposal {
    let (h, w) = (image.height(), image.width());
    let parsed = match parse_instruction(instruction) {
        Some(p) => p,
        None => {
            return RegionProposal {
                mask: all_ones(h, w),
                phrase: None,
                warnings: vec![format!(
                    "instruction not understood, using full-image region: {instruction:?}"
                )],
            };
        }
    };
    match parsed {
        ParsedInstruction::StyleTint { .. } => RegionProposal {
            mask: all_ones(h, w),
            phrase: Some(instruction.to_string()),
            warnings: vec![],
        },
        ParsedInstruction::BackgroundSwap { .. } | ParsedInstruction::Add { .. } => {
            let bg = estimate_background(image);
            let fg = foreground(image, bg);
            let blobs = find_blobs(&fg);
            let mut union: Vec<(usize, usize)> = Vec::new();
            for b in &blobs {
                union.extend_from_slice(&b.pixels);
            }
            RegionProposal {
                mask: complement(&mask_from_pixels(h, w, &union)),
                phrase: Some("the background".to_string()),
                warnings: vec![],
            }
        }
        ParsedInstruction::Recolor { shape, .. } | ParsedInstruction::Remove { shape } => {
            let bg = estimate_background(image);
            let fg = foreground(image, bg);
            let blobs = find_blobs(&fg);
            let matching: Vec<&Blob> =
                blobs.iter().filter(|b| b.classify() == Some(shape)).collect();
            if let Some(best) = matching.iter().max_by_key(|b| b.pixels.len()) {
                RegionProposal {
                    mask: mask_from_pixels(h, w, &best.pixels),
                    phrase: Some(format!("the {}", shape.word())),
                    warnings: vec![],
                }
            } else if let Some(best) = blobs.iter().min_by(|a, b| {
                let target = match shape {
                    Shape::Square => 0.95,
                    Shape::Circle => 0.78,
                    Shape::Triangle => 0.50,
                    Shape::Star => 0.30,
                };
                (a.fill_ratio() - target)
                    .abs()
                    .partial_cmp(&(b.fill_ratio() - target).abs())
                    .unwrap()
            }) {
                RegionProposal {
                    mask: mask_from_pixels(h, w, &best.pixels),
                    phrase: Some(format!("the {}", shape.word())),
                    warnings: vec![format!(
                        "no blob classified as {}, using closest blob",
                        shape.word()
                    )],
                }
            } else {
                RegionProposal {
                    mask: all_ones(h, w),
                    phrase: None,
                    warnings: vec![format!(
                        "no object blobs found for {:?}, using full-image region",
                        instruction
                    )],
                }
            }
        }
    }
}

/// Run-length encoded binary mask, row-major, starting with a zero run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskRle {
    pub h: usize,
    pub w: usize,
    pub runs: Vec<usize>,
}

impl MaskRle {
    pub fn decode(&self) -> Result<RegionMask, String> {
        let total: usize = self.runs.iter().sum();
        if total != self.h * self.w {
            return Err(format!(
                "rle covers {total} pixels, mask is {}x{}",
                self.h, self.w
            ));
        }
        let mut flat = Vec::with_capacity(total);
        let mut value = 0.0;
        for &run in &self.runs {
            flat.extend(std::iter::repeat(value).take(run));
            value = 1.0 - value;
        }
        RegionMask::new(
            ArrayD::from_shape_vec(IxDyn(&[self.h, self.w]), flat)
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())
    }

    pub fn encode(mask: &RegionMask) -> Self {
        let (h, w) = (mask.height(), mask.width());
        let mut runs = Vec::new();
        let mut current = 0.0;
        let mut len = 0usize;
        for y in 0..h {
            for x in 0..w {
                let v = if mask.data[[y, x]] >= 0.5 { 1.0 } else { 0.0 };
                if v == current {
                    len += 1;
                } else {
                    runs.push(len);
                    current = v;
                    len = 1;
                }
            }
        }
        runs.push(len);
        MaskRle { h, w, runs }
    }
}

#[derive(Debug, Serialize)]
struct RegionRequest<'a> {
    instruction: &'a str,
    image_base64: String,
}

#[derive(Debug, Deserialize)]
struct RegionResponse {
    mask_rle: MaskRle,
    #[serde(default)]
    phrase: Option<String>,
}

/// Minimal base64 (standard alphabet, padded) for the request payload.
fn base64_encode(bytes: &[u8]) -> String {
    const TABLE: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [
            chunk[0],
            chunk.get(1).copied().unwrap_or(0),
            chunk.get(2).copied().unwrap_or(0),
        ];
        let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
        out.push(TABLE[(n >> 18) as usize & 63] as char);
        out.push(TABLE[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 {
            TABLE[(n >> 6) as usize & 63] as char
        } else {
            '='
        });
        out.push(if chunk.len() > 2 {
            TABLE[n as usize & 63] as char
        } else {
            '='
        });
    }
    out
}

/// Client for an external region-proposal service speaking JSON over HTTP.
#[derive(Debug, Clone)]
pub struct ExternalRegionClient {
    pub url: String,
    pub timeout: Duration,
}

impl ExternalRegionClient {
    pub fn new(url: impl Into<String>) -> Self {
        ExternalRegionClient {
            url: url.into(),
            timeout: Duration::from_secs(10),
        }
    }

    /// From the `DREAMLINK_REGION_URL` environment variable, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var(crate::config::REGION_URL_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .map(Self::new)
    }

    fn parse_url(&self) -> Result<(String, String), String> {
        let rest = self
            .url
            .strip_prefix("http://")
            .ok_or_else(|| format!("only http:// urls are supported, got {}", self.url))?;
        let (hostport, path) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, "/"),
        };
        let hostport = if hostport.contains(':') {
            hostport.to_string()
        } else {
            format!("{hostport}:80")
        };
        Ok((hostport, path.to_string()))
    }

    fn post_once(&self, body: &str) -> Result<RegionResponse, String> {
        let (hostport, path) = self.parse_url()?;
        let addr = hostport
            .to_socket_addrs_first()
            .map_err(|e| format!("resolve {hostport}: {e}"))?;
        let mut stream =
            TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| e.to_string())?;
        stream
            .set_read_timeout(Some(self.timeout))
            .map_err(|e| e.to_string())?;
        stream
            .set_write_timeout(Some(self.timeout))
            .map_err(|e| e.to_string())?;
        let request = format!(
            "POST {path} HTTP/1.1\r\nHost: {hostport}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream
            .write_all(request.as_bytes())
            .map_err(|e| e.to_string())?;
        let mut raw = Vec::new();
        stream.read_to_end(&mut raw).map_err(|e| e.to_string())?;
        let text = String::from_utf8_lossy(&raw);
        let mut lines = text.splitn(2, "\r\n\r\n");
        let head = lines.next().unwrap_or("");
        let response_body = lines.next().unwrap_or("");
        let status = head
            .lines()
            .next()
            .and_then(|l| l.split_whitespace().nth(1))
            .unwrap_or("");
        if status != "200" {
            return Err(format!("service returned status {status:?}"));
        }
        serde_json::from_str::<RegionResponse>(response_body)
            .map_err(|e| format!("bad response body: {e}"))
    }

    /// POST the instruction and image; one retry, then error.
    pub fn propose(&self, instruction: &str, image: &ImageGrid) -> Result<RegionProposal, String> {
        let png = super::corpus::encode_png(image).map_err(|e| e.to_string())?;
        let body = serde_json::to_string(&RegionRequest {
            instruction,
            image_base64: base64_encode(&png),
        })
        .map_err(|e| e.to_string())?;
        let mut last_err = String::new();
        for _ in 0..2 {
            match self.post_once(&body) {
                Ok(resp) => {
                    let mask = resp.mask_rle.decode()?;
                    return Ok(RegionProposal {
                        mask,
                        phrase: resp.phrase,
                        warnings: vec![],
                    });
                }
                Err(e) => last_err = e,
            }
        }
        Err(last_err)
    }
}

trait ToSocketAddrsFirst {
    fn to_socket_addrs_first(&self) -> std::io::Result<std::net::SocketAddr>;
}

impl ToSocketAddrsFirst for String {
    fn to_socket_addrs_first(&self) -> std::io::Result<std::net::SocketAddr> {
        use std::net::ToSocketAddrs;
        self.to_socket_addrs()?.next().ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::NotFound, "no address for host")
        })
    }
}

/// Propose a region for an instruction against an image, resampled to
/// `(out_h, out_w)`. `mode` selects the proposer; external failures fall
/// back to the builtin heuristic with a warning attached.
pub fn propose_region(
    instruction: &str,
    image: &ImageGrid,
    out_h: usize,
    out_w: usize,
    mode: RegionMode,
) -> RegionProposal {
    let mut proposal = match mode {
        RegionMode::AllOnes => RegionProposal {
            mask: all_ones(image.height(), image.width()),
            phrase: None,
            warnings: vec![],
        },
        RegionMode::Builtin => builtin_propose(instruction, image),
        RegionMode::External => match ExternalRegionClient::from_env() {
            Some(client) => match client.propose(instruction, image) {
                Ok(p) => p,
                Err(e) => {
                    let mut p = builtin_propose(instruction, image);
                    p.warnings
                        .insert(0, format!("external region service failed ({e}); using builtin"));
                    p
                }
            },
            None => {
                let mut p = builtin_propose(instruction, image);
                p.warnings.insert(
                    0,
                    format!(
                        "external region mode requested but {} is not set; using builtin",
                        crate::config::REGION_URL_ENV
                    ),
                );
                p
            }
        },
    };
    if proposal.mask.height() != out_h || proposal.mask.width() != out_w {
        proposal.mask = proposal.mask.resample(out_h, out_w);
    }
    proposal
}
