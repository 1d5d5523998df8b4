//! Procedural exemplar-pair benchmark: base-image generator, parameterized
//! edit families with masks, seen/unseen splits and the DFD1 container.
//!
//! Every edit family is a deterministic, total `Image -> Image` function
//! whose outputs are quantized to f32 precision, so episodes survive the
//! f32 on-disk format bitwise and the evaluation oracle can re-apply the
//! exact edit.
//!
//! Edit semantics (x is a pixel value in [0,1], quantized to f32 after):
//! - invert:          x → 1 − x
//! - brightness(β):   x → clamp(x + β),  β ∈ [0.15, 0.35]
//! - grayscale:       all channels ← 0.299·R + 0.587·G + 0.114·B
//! - channel-swap:    (R, G, B) → (G, B, R)
//! - red-tint(ρ):     R → clamp(R + ρ), G/B unchanged,  ρ ∈ [0.2, 0.4]
//! - border(r,g,b):   overwrite the 1-px frame with the given color
//! - top-half-darken(δ): rows < H/2 get x → x·(1 − δ),  δ ∈ [0.3, 0.5]
//! - checkerboard(δ): 4×4 cells with even (cy+cx) get x → x·(1 − δ)

use crate::error::{Error, Result};
use crate::formats::{ByteReader, ByteWriter};
use crate::rng::SeededRng;
use crate::vision::{Image, CHANNELS};
use std::path::Path;

pub const DFD1_MAGIC: [u8; 4] = *b"DFD1";
pub const DFD1_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditFamily {
    Invert,
    Brightness,
    Grayscale,
    ChannelSwap,
    RedTint,
    Border,
    TopHalfDarken,
    Checkerboard,
}

pub const ALL_FAMILIES: [EditFamily; 8] = [
    EditFamily::Invert,
    EditFamily::Brightness,
    EditFamily::Grayscale,
    EditFamily::ChannelSwap,
    EditFamily::RedTint,
    EditFamily::Border,
    EditFamily::TopHalfDarken,
    EditFamily::Checkerboard,
];

impl EditFamily {
    pub fn id(self) -> u32 {
        ALL_FAMILIES.iter().position(|&f| f == self).unwrap() as u32
    }

    pub fn from_id(id: u32) -> Result<EditFamily> {
        ALL_FAMILIES
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Malformed(format!("unknown edit family id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            EditFamily::Invert => "invert",
            EditFamily::Brightness => "brightness",
            EditFamily::Grayscale => "grayscale",
            EditFamily::ChannelSwap => "channel-swap",
            EditFamily::RedTint => "red-tint",
            EditFamily::Border => "border",
            EditFamily::TopHalfDarken => "top-half-darken",
            EditFamily::Checkerboard => "checkerboard",
        }
    }

    pub fn from_name(name: &str) -> Result<EditFamily> {
        ALL_FAMILIES
            .iter()
            .copied()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown edit family `{name}`")))
    }

    /// Draws family-specific parameters from the episode generator.
    pub fn sample_params(self, rng: &mut SeededRng) -> Vec<f64> {
        match self {
            EditFamily::Invert | EditFamily::Grayscale | EditFamily::ChannelSwap => vec![],
            EditFamily::Brightness => vec![q32(rng.uniform_range(0.15, 0.35))],
            EditFamily::RedTint => vec![q32(rng.uniform_range(0.2, 0.4))],
            EditFamily::Border => vec![
                q32(rng.uniform()),
                q32(rng.uniform()),
                q32(rng.uniform()),
            ],
            EditFamily::TopHalfDarken => vec![q32(rng.uniform_range(0.3, 0.5))],
            EditFamily::Checkerboard => vec![q32(rng.uniform_range(0.3, 0.5))],
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EditSpec {
    pub family: EditFamily,
    pub params: Vec<f64>,
    pub seed: u64,
}

/// Boolean pixel mask, row-major H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Role {
    Train,
    Eval,
}

/// One supervision/evaluation unit. Training consumes only (a, a′); the
/// query pair (b, b′) exists for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub exemplar_source: Image,  // a
    pub exemplar_target: Image,  // a′
    pub query: Image,            // b
    pub query_target: Image,     // b′
    pub exemplar_mask: Mask,
    pub query_mask: Mask,
    pub spec: EditSpec,
    pub split: Split,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn train_episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(|e| e.role == Role::Train)
    }

    pub fn eval_episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(|e| e.role == Role::Eval)
    }

    /// Families present anywhere in the dataset, by ascending id.
    pub fn families(&self) -> Vec<EditFamily> {
        let mut fams: Vec<EditFamily> = Vec::new();
        for e in &self.episodes {
            if !fams.contains(&e.spec.family) {
                fams.push(e.spec.family);
            }
        }
        fams.sort_by_key(|f| f.id());
        fams
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub seen_families: Vec<EditFamily>,
    pub unseen_families: Vec<EditFamily>,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            h: 16,
            w: 16,
            patch: 4,
            seen_families: vec![
                EditFamily::Invert,
                EditFamily::Brightness,
                EditFamily::Grayscale,
                EditFamily::Border,
            ],
            unseen_families: vec![EditFamily::ChannelSwap, EditFamily::TopHalfDarken],
            train_episodes: 500,
            eval_episodes: 100,
            seed: 1,
        }
    }
}

fn q32(x: f64) -> f64 {
    x as f32 as f64
}

/// Background fill plus 2–4 random axis-aligned rectangles and discs,
/// all drawn deterministically from the seed.
pub fn gen_base(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = SeededRng::derive(seed, 0xBA5E);
    let bg = [q32(rng.uniform()), q32(rng.uniform()), q32(rng.uniform())];
    let mut img = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            img.set_pixel(y, x, bg);
        }
    }
    let shapes = 2 + rng.index(3); // 2..=4
    for _ in 0..shapes {
        let color = [q32(rng.uniform()), q32(rng.uniform()), q32(rng.uniform())];
        if rng.uniform() < 0.5 {
            // rectangle
            let y0 = rng.index(h);
            let x0 = rng.index(w);
            let hh = 1 + rng.index(h / 2);
            let ww = 1 + rng.index(w / 2);
            for y in y0..(y0 + hh).min(h) {
                for x in x0..(x0 + ww).min(w) {
                    img.set_pixel(y, x, color);
                }
            }
        } else {
            // disc
            let cy = rng.index(h) as f64;
            let cx = rng.index(w) as f64;
            let r = 1.0 + rng.uniform() * (h.min(w) as f64 / 3.0);
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    if dy * dy + dx * dx <= r * r {
                        img.set_pixel(y, x, color);
                    }
                }
            }
        }
    }
    img
}

/// Applies the edit family deterministically and returns the edited image
/// plus the changed-pixel mask.
pub fn apply_edit(img: &Image, spec: &EditSpec) -> (Image, Mask) {
    let (h, w) = (img.h, img.w);
    let mut out = img.clone();
    match spec.family {
        EditFamily::Invert => {
            for v in out.data.iter_mut() {
                *v = q32(1.0 - *v);
            }
        }
        EditFamily::Brightness => {
            let beta = spec.params[0];
            for v in out.data.iter_mut() {
                *v = q32((*v + beta).clamp(0.0, 1.0));
            }
        }
        EditFamily::Grayscale => {
            for y in 0..h {
                for x in 0..w {
                    let [r, g, b] = img.pixel(y, x);
                    let lum = q32(0.299 * r + 0.587 * g + 0.114 * b);
                    out.set_pixel(y, x, [lum, lum, lum]);
                }
            }
        }
        EditFamily::ChannelSwap => {
            for y in 0..h {
                for x in 0..w {
                    let [r, g, b] = img.pixel(y, x);
                    out.set_pixel(y, x, [g, b, r]);
                }
            }
        }
        EditFamily::RedTint => {
            let rho = spec.params[0];
            for y in 0..h {
                for x in 0..w {
                    let [r, g, b] = img.pixel(y, x);
                    out.set_pixel(y, x, [q32((r + rho).clamp(0.0, 1.0)), g, b]);
                }
            }
        }
        EditFamily::Border => {
            let color = [spec.params[0], spec.params[1], spec.params[2]];
            for y in 0..h {
                for x in 0..w {
                    if y == 0 || y == h - 1 || x == 0 || x == w - 1 {
                        out.set_pixel(y, x, color);
                    }
                }
            }
        }
        EditFamily::TopHalfDarken => {
            let delta = spec.params[0];
            for y in 0..h / 2 {
                for x in 0..w {
                    let p = img.pixel(y, x);
                    out.set_pixel(y, x, [q32(p[0] * (1.0 - delta)), q32(p[1] * (1.0 - delta)), q32(p[2] * (1.0 - delta))]);
                }
            }
        }
        EditFamily::Checkerboard => {
            let delta = spec.params[0];
            for y in 0..h {
                for x in 0..w {
                    if (y / 4 + x / 4) % 2 == 0 {
                        let p = img.pixel(y, x);
                        out.set_pixel(y, x, [q32(p[0] * (1.0 - delta)), q32(p[1] * (1.0 - delta)), q32(p[2] * (1.0 - delta))]);
                    }
                }
            }
        }
    }
    let bits = (0..h * w)
        .map(|i| {
            (0..CHANNELS).any(|c| (out.data[i * CHANNELS + c] - img.data[i * CHANNELS + c]).abs() > 1e-6)
        })
        .collect();
    (out, Mask { h, w, bits })
}

fn make_episode(cfg: &DatasetConfig, index: u64, family: EditFamily, split: Split, role: Role) -> Episode {
    let episode_seed = SeededRng::derive(cfg.seed, index).next_u64();
    let mut rng = SeededRng::derive(episode_seed, 0xE915);
    let spec = EditSpec {
        family,
        params: family.sample_params(&mut rng),
        seed: episode_seed,
    };
    let a = gen_base(cfg.h, cfg.w, rng.next_u64());
    let b = gen_base(cfg.h, cfg.w, rng.next_u64());
    let (a2, mask_a) = apply_edit(&a, &spec);
    let (b2, mask_b) = apply_edit(&b, &spec);
    Episode {
        exemplar_source: a,
        exemplar_target: a2,
        query: b,
        query_target: b2,
        exemplar_mask: mask_a,
        query_mask: mask_b,
        spec,
        split,
        role,
    }
}

/// Training episodes come only from seen families; eval episodes from both.
/// Every episode is reproducible from (dataset seed, index).
pub fn gen_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.seen_families.is_empty() {
        return Err(Error::Config("no seen families configured".into()));
    }
    for f in &cfg.unseen_families {
        if cfg.seen_families.contains(f) {
            return Err(Error::Config(format!(
                "family `{}` appears in both seen and unseen splits",
                f.name()
            )));
        }
    }
    let mut episodes = Vec::with_capacity(cfg.train_episodes + cfg.eval_episodes);
    for i in 0..cfg.train_episodes {
        let mut pick = SeededRng::derive(cfg.seed, 1_000_000 + i as u64);
        let family = cfg.seen_families[pick.index(cfg.seen_families.len())];
        episodes.push(make_episode(cfg, i as u64, family, Split::Seen, Role::Train));
    }
    let mut all: Vec<(EditFamily, Split)> = cfg
        .seen_families
        .iter()
        .map(|&f| (f, Split::Seen))
        .collect();
    all.extend(cfg.unseen_families.iter().map(|&f| (f, Split::Unseen)));
    for i in 0..cfg.eval_episodes {
        let idx = (cfg.train_episodes + i) as u64;
        // round-robin over families so every split is represented evenly
        let (family, split) = all[i % all.len()];
        episodes.push(make_episode(cfg, idx, family, split, Role::Eval));
    }
    Ok(Dataset {
        h: cfg.h,
        w: cfg.w,
        patch: cfg.patch,
        episodes,
    })
}

fn role_split_tag(e: &Episode) -> u8 {
    match (e.role, e.split) {
        (Role::Train, _) => 0,
        (Role::Eval, Split::Seen) => 1,
        (Role::Eval, Split::Unseen) => 2,
    }
}

fn tag_role_split(tag: u8) -> Result<(Role, Split)> {
    match tag {
        0 => Ok((Role::Train, Split::Seen)),
        1 => Ok((Role::Eval, Split::Seen)),
        2 => Ok((Role::Eval, Split::Unseen)),
        other => Err(Error::Malformed(format!("unknown split tag {other}"))),
    }
}

fn write_image(w: &mut ByteWriter, img: &Image) {
    for &v in &img.data {
        w.f32(v as f32);
    }
}

fn read_image(r: &mut ByteReader, h: usize, w: usize) -> Result<Image> {
    let mut data = Vec::with_capacity(h * w * CHANNELS);
    for _ in 0..h * w * CHANNELS {
        data.push(r.f32()? as f64);
    }
    Ok(Image::from_data(h, w, data))
}

fn write_mask(w: &mut ByteWriter, mask: &Mask) {
    // bit-packed rows, LSB-first within each byte
    for y in 0..mask.h {
        let mut byte = 0u8;
        for x in 0..mask.w {
            if mask.get(y, x) {
                byte |= 1 << (x % 8);
            }
            if x % 8 == 7 || x == mask.w - 1 {
                w.u8(byte);
                byte = 0;
            }
        }
    }
}

fn read_mask(r: &mut ByteReader, h: usize, w: usize) -> Result<Mask> {
    let row_bytes = w.div_ceil(8);
    let mut bits = vec![false; h * w];
    for y in 0..h {
        let row = r.bytes(row_bytes)?;
        for x in 0..w {
            bits[y * w + x] = row[x / 8] & (1 << (x % 8)) != 0;
        }
    }
    Ok(Mask { h, w, bits })
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.magic(&DFD1_MAGIC);
    w.u32(DFD1_VERSION);
    w.u32(d.episodes.len() as u32);
    w.u16(d.h as u16);
    w.u16(d.w as u16);
    w.u16(CHANNELS as u16);
    w.u16(d.patch as u16);
    for e in &d.episodes {
        w.u32(e.spec.family.id());
        w.u32(e.spec.params.len() as u32);
        for &p in &e.spec.params {
            w.f32(p as f32);
        }
        w.u64(e.spec.seed);
        w.u8(role_split_tag(e));
        write_image(&mut w, &e.exemplar_source);
        write_image(&mut w, &e.exemplar_target);
        write_image(&mut w, &e.query);
        write_image(&mut w, &e.query_target);
        write_mask(&mut w, &e.exemplar_mask);
        write_mask(&mut w, &e.query_mask);
    }
    w.finish()
}

pub fn decode_dataset(raw: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::checked(raw)?;
    r.expect_magic(&DFD1_MAGIC)?;
    r.expect_version(DFD1_VERSION)?;
    let count = r.u32()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let c = r.u16()? as usize;
    let patch = r.u16()? as usize;
    if c != CHANNELS {
        return Err(Error::Malformed(format!("unsupported channel count {c}")));
    }
    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        let family = EditFamily::from_id(r.u32()?)?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(r.f32()? as f64);
        }
        let seed = r.u64()?;
        let (role, split) = tag_role_split(r.u8()?)?;
        let a = read_image(&mut r, h, w)?;
        let a2 = read_image(&mut r, h, w)?;
        let b = read_image(&mut r, h, w)?;
        let b2 = read_image(&mut r, h, w)?;
        let mask_a = read_mask(&mut r, h, w)?;
        let mask_b = read_mask(&mut r, h, w)?;
        episodes.push(Episode {
            exemplar_source: a,
            exemplar_target: a2,
            query: b,
            query_target: b2,
            exemplar_mask: mask_a,
            query_mask: mask_b,
            spec: EditSpec {
                family,
                params,
                seed,
            },
            split,
            role,
        });
    }
    r.done()?;
    Ok(Dataset {
        h,
        w,
        patch,
        episodes,
    })
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(d))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let raw = std::fs::read(path)?;
    decode_dataset(&raw)
}
