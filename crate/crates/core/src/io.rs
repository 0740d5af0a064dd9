//! Image and model persistence.
//!
//! Images are read from binary (`P5`) or plain (`P2`) graymaps with 8- or
//! 16-bit samples, or from the text float grid format:
//!
//! ```text
//! FGRID <w> <h>
//! <w·h whitespace-separated decimals, row-major>
//! ```
//!
//! Models are stored as versioned JSON. Reals are written in their shortest
//! round-trip decimal form, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::influence::InfluenceFunction;
use crate::model::{DiffusionModel, StageParams, Variant};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// On-disk image encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// Binary graymap; 8-bit when the peak is at most 255, otherwise 16-bit.
    Pgm,
    /// Lossless text grid.
    FloatGrid,
}

impl ImageFormat {
    /// `.fgrid`/`.txt` map to the float grid, everything else to PGM.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("fgrid") || e.eq_ignore_ascii_case("txt") => {
                ImageFormat::FloatGrid
            }
            _ => ImageFormat::Pgm,
        }
    }
}

struct Tokens<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(data: &'a [u8]) -> Self {
        Tokens { data, pos: 0 }
    }

    /// Next whitespace-delimited token; `#` starts a comment running to end of line.
    fn next(&mut self) -> Option<&'a str> {
        loop {
            while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.data.len() && self.data[self.pos] == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| std::str::from_utf8(&self.data[start..self.pos]).ok())?
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self
            .next()
            .ok_or_else(|| Error::Format(format!("missing {what}")))?;
        tok.parse()
            .map_err(|_| Error::Format(format!("bad {what} '{tok}'")))
    }
}

fn dimensions(tokens: &mut Tokens<'_>) -> Result<(usize, usize)> {
    let w: usize = tokens.number("width")?;
    let h: usize = tokens.number("height")?;
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("empty image {w}x{h}")));
    }
    w.checked_mul(h)
        .filter(|&n| n <= 1 << 30)
        .ok_or_else(|| Error::Format(format!("image {w}x{h} is too large")))?;
    Ok((w, h))
}

/// Parses a graymap (`P2` or `P5`) or a float grid from memory.
pub fn decode_image(data: &[u8]) -> Result<Image> {
    let mut tokens = Tokens::new(data);
    let magic = tokens
        .next()
        .ok_or_else(|| Error::Format("empty file".into()))?;
    match magic {
        "FGRID" => {
            let (w, h) = dimensions(&mut tokens)?;
            let mut values = Vec::with_capacity(w * h);
            for i in 0..w * h {
                let tok = tokens
                    .next()
                    .ok_or_else(|| Error::Format(format!("truncated grid: {i} of {} values", w * h)))?;
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Format(format!("bad value '{tok}'")))?;
                values.push(v);
            }
            if tokens.next().is_some() {
                return Err(Error::Format("trailing data after grid".into()));
            }
            Image::new(w, h, values)
        }
        "P2" | "P5" => {
            let (w, h) = dimensions(&mut tokens)?;
            let maxval: u32 = tokens.number("maxval")?;
            if maxval == 0 || maxval > 65535 {
                return Err(Error::Format(format!("unsupported depth: maxval {maxval}")));
            }
            let n = w * h;
            let values: Vec<f64> = if magic == "P2" {
                (0..n)
                    .map(|_| {
                        let v: u32 = tokens.number("sample")?;
                        if v > maxval {
                            return Err(Error::Format(format!("sample {v} exceeds maxval {maxval}")));
                        }
                        Ok(v as f64)
                    })
                    .collect::<Result<_>>()?
            } else {
                // exactly one whitespace byte separates the header from the raster
                let start = tokens.pos + 1;
                let bytes = if maxval < 256 { 1 } else { 2 };
                let raster = data
                    .get(start..start + n * bytes)
                    .ok_or_else(|| Error::Format("truncated raster".into()))?;
                if bytes == 1 {
                    raster.iter().map(|&b| b as f64).collect()
                } else {
                    raster
                        .chunks_exact(2)
                        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
                        .collect()
                }
            };
            Image::new(w, h, values)
        }
        other => Err(Error::Format(format!("unrecognized image header '{other}'"))),
    }
}

/// Binary graymap with samples `round(clamp(v, 0, peak))`; `maxval = round(peak)`.
pub fn encode_pgm(img: &Image, peak: f64) -> Result<Vec<u8>> {
    if !(peak >= 1.0) || peak > 65535.0 {
        return Err(Error::Parameter(format!("graymap peak must lie in [1, 65535], got {peak}")));
    }
    let maxval = peak.round() as u32;
    let mut out = format!("P5\n{} {}\n{maxval}\n", img.width(), img.height()).into_bytes();
    let quantize = |v: f64| v.clamp(0.0, peak).round().min(maxval as f64) as u16;
    if maxval < 256 {
        out.extend(img.as_slice().iter().map(|&v| quantize(v) as u8));
    } else {
        for &v in img.as_slice() {
            out.extend_from_slice(&quantize(v).to_be_bytes());
        }
    }
    Ok(out)
}

/// Float grid text, one image row per line, shortest round-trip decimals.
pub fn encode_fgrid(img: &Image) -> String {
    let mut out = format!("FGRID {} {}\n", img.width(), img.height());
    for row in img.as_slice().chunks(img.width()) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let data = fs::read(path)?;
    decode_image(&data).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes `img` in the format implied by the extension (see [`ImageFormat::from_path`]).
/// Graymaps clamp to `[0, peak]` and round; the float grid is lossless.
pub fn save_image(img: &Image, path: impl AsRef<Path>, peak: f64) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path) {
        ImageFormat::Pgm => encode_pgm(img, peak)?,
        ImageFormat::FloatGrid => encode_fgrid(img).into_bytes(),
    };
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum VariantFile {
    Prox,
    Projected { floor: f64 },
}

#[derive(Serialize, Deserialize)]
struct RbfFile {
    count: usize,
    range: f64,
    bandwidth: f64,
}

#[derive(Serialize, Deserialize)]
struct GeneratorFile {
    name: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct StageFile {
    beta: f64,
    filters: Vec<Vec<f64>>,
    rbf_weights: Vec<Vec<f64>>,
}

/// Serialized form of a [`DiffusionModel`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    filter_size: usize,
    stage_count: usize,
    num_filters: usize,
    looks: u32,
    value_range: f64,
    variant: VariantFile,
    rbf: RbfFile,
    generator: GeneratorFile,
    metadata: BTreeMap<String, String>,
    stages: Vec<StageFile>,
}

pub fn model_to_json(model: &DiffusionModel) -> Result<String> {
    model.validate()?;
    let first = &model.stages[0].influences[0];
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        filter_size: model.filter_size,
        stage_count: model.num_stages(),
        num_filters: model.num_filters(),
        looks: model.looks,
        value_range: model.value_range,
        variant: match model.variant {
            Variant::Prox => VariantFile::Prox,
            Variant::Projected { floor } => VariantFile::Projected { floor },
        },
        rbf: RbfFile {
            count: first.len(),
            range: first.range(),
            bandwidth: first.bandwidth(),
        },
        generator: GeneratorFile {
            name: model.generator.clone(),
            seed: model.seed,
        },
        metadata: model.metadata.clone(),
        stages: model
            .stages
            .iter()
            .map(|s| StageFile {
                beta: s.beta,
                filters: s.filters.clone(),
                rbf_weights: s.influences.iter().map(|p| p.weights().to_vec()).collect(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn model_from_json(text: &str) -> Result<DiffusionModel> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("model file: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Format("model file lacks an integer format_version".into()))?;
    if version != MODEL_FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion(version.min(u32::MAX as u64) as u32));
    }
    let file: ModelFile =
        serde_json::from_value(raw).map_err(|e| Error::Format(format!("model file: {e}")))?;
    if file.stages.len() != file.stage_count {
        return Err(Error::Format(format!(
            "stage_count is {} but {} stages are listed",
            file.stage_count,
            file.stages.len()
        )));
    }
    let stages = file
        .stages
        .into_iter()
        .enumerate()
        .map(|(t, s)| {
            if s.filters.len() != file.num_filters || s.rbf_weights.len() != file.num_filters {
                return Err(Error::Format(format!("stage {t}: expected {} filters", file.num_filters)));
            }
            if s.rbf_weights.iter().any(|w| w.len() != file.rbf.count) {
                return Err(Error::Format(format!("stage {t}: expected {} RBF weights", file.rbf.count)));
            }
            let influences = s
                .rbf_weights
                .into_iter()
                .map(|w| InfluenceFunction::with_bandwidth(w, file.rbf.range, file.rbf.bandwidth))
                .collect::<Result<Vec<_>>>()?;
            Ok(StageParams {
                beta: s.beta,
                filters: s.filters,
                influences,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = DiffusionModel {
        stages,
        filter_size: file.filter_size,
        looks: file.looks,
        value_range: file.value_range,
        variant: match file.variant {
            VariantFile::Prox => Variant::Prox,
            VariantFile::Projected { floor } => Variant::Projected { floor },
        },
        generator: file.generator.name,
        seed: file.generator.seed,
        metadata: file.metadata,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &DiffusionModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DiffusionModel> {
    model_from_json(&fs::read_to_string(path)?)
}
