//! Synthetic paired camera/LiDAR BEV scenes.
//!
//! A scene is a latent layout of map elements rendered to K binary masks.
//! Class `k` is drawn as one of three structure kinds, chosen by `k % 3`:
//! thin stripes (dividers), rectangular blobs (crossings) and bands along
//! the grid border (boundaries). Each modality sees the layout through a
//! different lossy channel:
//!
//! * camera: `Σ_k mask_k · sig_k`, box-blurred with radius `cam_blur`, plus
//!   Gaussian noise. Class signatures are distinct, positions are smeared.
//! * LiDAR: the same layout rendered crisply, but with signatures pulled
//!   towards a shared vector (`(1 - gap) · sig_k + gap · shared`), rotated by
//!   a fixed channel rotation of angle `gap · π/2`, plus noise. Square
//!   blocks are then dropped (zeroed) with probability `lidar_dropout`.
//!
//! On top of that every scene has a sensor condition: one modality, picked
//! per scene, is degraded with severity `s = degradation · u`, `u ~ U(0, 1)`.
//! The degraded modality keeps `1 - s` of its signal, gets noise scaled by
//! `1 + s` and picks up `s ·` a fixed artifact vector (glare for the camera,
//! clutter for LiDAR) at every observed pixel.
//!
//! Everything is a pure function of `(spec, index)`: the world (signatures,
//! rotation) comes from the spec seed, the layout and the sensor draws from
//! per-index streams.

use std::io::{Read, Write};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

/// Side length of a LiDAR dropout block.
pub const DROPOUT_BLOCK: usize = 4;

/// Scene indices at or above this offset are reserved for held-out data.
pub const HELDOUT_OFFSET: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub seed: u64,
    pub gap: f64,
    pub cam_noise: f64,
    pub lidar_noise: f64,
    pub lidar_dropout: f64,
    pub cam_blur: usize,
    /// Maximum per-scene severity of the sensor condition, in `[0, 1]`.
    pub degradation: f64,
}

impl SceneSpec {
    /// The standard desk-scale setting.
    pub fn desk() -> Self {
        SceneSpec {
            h: 16,
            w: 16,
            c: 16,
            k: 3,
            seed: 0,
            gap: 0.5,
            cam_noise: 1.0,
            lidar_noise: 1.0,
            lidar_dropout: 0.3,
            cam_blur: 1,
            degradation: 1.0,
        }
    }

    /// Noise-free, gap-free spec: both modalities see the same crisp features.
    pub fn degenerate(h: usize, w: usize, c: usize, k: usize, seed: u64) -> Self {
        SceneSpec {
            h,
            w,
            c,
            k,
            seed,
            gap: 0.0,
            cam_noise: 0.0,
            lidar_noise: 0.0,
            lidar_dropout: 0.0,
            cam_blur: 0,
            degradation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(Error::Input(format!(
                "scene extents must be positive, got {}×{}×{}",
                self.h, self.w, self.c
            )));
        }
        if self.k == 0 {
            return Err(Error::Input("scene needs at least one class".into()));
        }
        for (name, v) in [
            ("gap", self.gap),
            ("lidar_dropout", self.lidar_dropout),
            ("degradation", self.degradation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [("cam_noise", self.cam_noise), ("lidar_noise", self.lidar_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Input(format!("{name} must be a finite non-negative σ, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Top,
    Bottom,
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Structure {
    /// Full-length line, `width` pixels thick, starting at row/column `offset`.
    Stripe {
        class: usize,
        vertical: bool,
        offset: usize,
        width: usize,
    },
    Blob {
        class: usize,
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
    },
    Band {
        class: usize,
        side: Side,
        width: usize,
    },
}

impl Structure {
    pub fn class(&self) -> usize {
        match *self {
            Structure::Stripe { class, .. } | Structure::Blob { class, .. } | Structure::Band { class, .. } => class,
        }
    }

    fn covers(&self, y: usize, x: usize, h: usize, w: usize) -> bool {
        match *self {
            Structure::Stripe {
                vertical,
                offset,
                width,
                ..
            } => {
                let p = if vertical { x } else { y };
                p >= offset && p < offset + width
            }
            Structure::Blob { y0, x0, h: bh, w: bw, .. } => y >= y0 && y < y0 + bh && x >= x0 && x < x0 + bw,
            Structure::Band { side, width, .. } => match side {
                Side::Top => y < width,
                Side::Bottom => y + width >= h,
                Side::Left => x < width,
                Side::Right => x + width >= w,
            },
        }
    }
}

/// Latent description of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub structures: Vec<Structure>,
    /// Row-major over the block grid; `true` where LiDAR is missing.
    pub dropped_blocks: Vec<bool>,
    pub condition: Condition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Camera,
    Lidar,
}

/// Which sensor is degraded in a scene, and how badly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Condition {
    pub degraded: Modality,
    pub severity: f64,
}

impl Condition {
    pub fn severity_of(&self, m: Modality) -> f64 {
        if self.degraded == m {
            self.severity
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub index: u64,
    /// H×W×C
    pub cam: Tensor,
    /// H×W×C
    pub lidar: Tensor,
    /// H×W×K, {0, 1}-valued; plane k is the mask of class k.
    pub masks: Tensor,
    pub spec: SceneSpec,
    pub layout: Layout,
}

impl Scene {
    pub fn mask_plane(&self, class: usize) -> Vec<f64> {
        let k = self.spec.k;
        self.masks.data().iter().skip(class).step_by(k).copied().collect()
    }
}

/// Noise-free renderings, exposed so tests can inspect what each modality
/// loses.
#[derive(Clone, Debug)]
pub struct CleanRender {
    pub masks: Tensor,
    /// Camera features before blur.
    pub cam_sharp: Tensor,
    /// Camera features after blur, before noise.
    pub cam: Tensor,
    /// LiDAR features before dropout and noise.
    pub lidar: Tensor,
}

/// Fixed per-seed sensor model.
#[derive(Clone, Debug)]
pub struct World {
    /// K×C
    pub cam_signatures: Vec<Vec<f64>>,
    /// K×C, after collapse and rotation.
    pub lidar_signatures: Vec<Vec<f64>>,
    pub shared: Vec<f64>,
    /// C×C row-major orthogonal matrix applied to LiDAR signatures.
    pub rotation: Vec<f64>,
    /// Offsets added by a degraded camera / LiDAR at full severity.
    pub cam_artifact: Vec<f64>,
    pub lidar_artifact: Vec<f64>,
}

impl World {
    pub fn new(spec: &SceneSpec) -> Self {
        let (c, k) = (spec.c, spec.k);
        let mut rng = Rng::new(spec.seed, streams::WORLD);
        let cam_signatures: Vec<Vec<f64>> = (0..k).map(|_| (0..c).map(|_| rng.normal()).collect()).collect();
        let shared: Vec<f64> = (0..c).map(|_| rng.normal()).collect();

        // Channel pairs from a random permutation, each rotated by gap·π/2.
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            let j = rng.int_range(0, i);
            perm.swap(i, j);
        }
        let mut rotation = vec![0.0; c * c];
        for i in 0..c {
            rotation[i * c + i] = 1.0;
        }
        if spec.gap > 0.0 {
            let (s, co) = (spec.gap * std::f64::consts::FRAC_PI_2).sin_cos();
            for pair in perm.chunks_exact(2) {
                let (a, b) = (pair[0], pair[1]);
                rotation[a * c + a] = co;
                rotation[a * c + b] = -s;
                rotation[b * c + a] = s;
                rotation[b * c + b] = co;
            }
        }

        let lidar_signatures = cam_signatures
            .iter()
            .map(|sig| {
                let collapsed: Vec<f64> = sig
                    .iter()
                    .zip(&shared)
                    .map(|(a, s)| (1.0 - spec.gap) * a + spec.gap * s)
                    .collect();
                if spec.gap == 0.0 {
                    return collapsed;
                }
                (0..c)
                    .map(|i| (0..c).map(|j| rotation[i * c + j] * collapsed[j]).sum())
                    .collect()
            })
            .collect();
        let cam_artifact = (0..c).map(|_| rng.normal()).collect();
        let lidar_artifact = (0..c).map(|_| rng.normal()).collect();

        World {
            cam_signatures,
            lidar_signatures,
            shared,
            rotation,
            cam_artifact,
            lidar_artifact,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SceneGenerator {
    spec: SceneSpec,
    world: World,
}

fn render(masks: &Tensor, sigs: &[Vec<f64>], c: usize) -> Tensor {
    let k = sigs.len();
    let n = masks.len() / k;
    let mut out = vec![0.0; n * c];
    for p in 0..n {
        for (kk, sig) in sigs.iter().enumerate() {
            if masks.data()[p * k + kk] != 0.0 {
                for (o, s) in out[p * c..(p + 1) * c].iter_mut().zip(sig) {
                    *o += s;
                }
            }
        }
    }
    Tensor::from_parts(masks.shape()[..2].iter().copied().chain([c]).collect(), out)
}

/// Mean over the in-bounds (2r+1)² window at every position.
pub fn box_blur(x: &Tensor, radius: usize) -> Tensor {
    if radius == 0 {
        return x.clone();
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let r = radius as isize;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let dst = (y as usize * w + xx as usize) * c;
            let mut count = 0usize;
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xs in (xx - r).max(0)..=(xx + r).min(w as isize - 1) {
                    let src = (yy as usize * w + xs as usize) * c;
                    for ch in 0..c {
                        out[dst + ch] += x.data()[src + ch];
                    }
                    count += 1;
                }
            }
            for v in &mut out[dst..dst + c] {
                *v /= count as f64;
            }
        }
    }
    Tensor::from_parts(vec![h, w, c], out)
}

impl SceneGenerator {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let world = World::new(&spec);
        Ok(SceneGenerator { spec, world })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn layout(&self, index: u64) -> Layout {
        let (h, w) = (self.spec.h, self.spec.w);
        let mut rng = Rng::indexed(self.spec.seed, streams::SCENE, index);
        let mut structures = Vec::new();
        for class in 0..self.spec.k {
            match class % 3 {
                0 => {
                    for _ in 0..rng.int_range(1, 2) {
                        let vertical = rng.bernoulli(0.5);
                        let len = if vertical { w } else { h };
                        let width = rng.int_range(1, 2).min(len);
                        structures.push(Structure::Stripe {
                            class,
                            vertical,
                            offset: rng.int_range(0, len - width),
                            width,
                        });
                    }
                }
                1 => {
                    for _ in 0..rng.int_range(1, 3) {
                        let bh = rng.int_range(2, (h / 4).max(2)).min(h);
                        let bw = rng.int_range(2, (w / 4).max(2)).min(w);
                        structures.push(Structure::Blob {
                            class,
                            y0: rng.int_range(0, h - bh),
                            x0: rng.int_range(0, w - bw),
                            h: bh,
                            w: bw,
                        });
                    }
                }
                _ => {
                    let side = [Side::Top, Side::Bottom, Side::Left, Side::Right][rng.int_range(0, 3)];
                    let extent = if matches!(side, Side::Top | Side::Bottom) { h } else { w };
                    structures.push(Structure::Band {
                        class,
                        side,
                        width: rng.int_range(1, 2).min(extent),
                    });
                }
            }
        }

        let mut sensor = Rng::indexed(self.spec.seed, streams::SENSOR, index);
        let blocks = h.div_ceil(DROPOUT_BLOCK) * w.div_ceil(DROPOUT_BLOCK);
        let dropped_blocks = (0..blocks).map(|_| sensor.bernoulli(self.spec.lidar_dropout)).collect();
        let degraded = if sensor.bernoulli(0.5) {
            Modality::Camera
        } else {
            Modality::Lidar
        };
        let severity = self.spec.degradation * sensor.uniform();
        Layout {
            structures,
            dropped_blocks,
            condition: Condition { degraded, severity },
        }
    }

    pub fn masks(&self, layout: &Layout) -> Tensor {
        let (h, w, k) = (self.spec.h, self.spec.w, self.spec.k);
        let mut m = Tensor::zeros(&[h, w, k]);
        for s in &layout.structures {
            for y in 0..h {
                for x in 0..w {
                    if s.covers(y, x, h, w) {
                        m.set(&[y, x, s.class()], 1.0);
                    }
                }
            }
        }
        m
    }

    pub fn render_clean(&self, layout: &Layout) -> CleanRender {
        let masks = self.masks(layout);
        let cam_sharp = render(&masks, &self.world.cam_signatures, self.spec.c);
        let cam = box_blur(&cam_sharp, self.spec.cam_blur);
        let lidar = render(&masks, &self.world.lidar_signatures, self.spec.c);
        CleanRender {
            masks,
            cam_sharp,
            cam,
            lidar,
        }
    }

    pub fn is_dropped(&self, layout: &Layout, y: usize, x: usize) -> bool {
        let bw = self.spec.w.div_ceil(DROPOUT_BLOCK);
        layout.dropped_blocks[(y / DROPOUT_BLOCK) * bw + x / DROPOUT_BLOCK]
    }

    pub fn scene(&self, index: u64) -> Scene {
        let s = &self.spec;
        let layout = self.layout(index);
        let clean = self.render_clean(&layout);
        // Noise is drawn after the dropout mask on the same stream, so it
        // starts at a fixed offset regardless of the layout.
        let mut sensor = Rng::indexed(s.seed, streams::SENSOR, index);
        for _ in 0..layout.dropped_blocks.len() + 2 {
            sensor.next_u64();
        }
        let sc = layout.condition.severity_of(Modality::Camera);
        let sl = layout.condition.severity_of(Modality::Lidar);
        let mut cam = clean.cam;
        for (i, v) in cam.data_mut().iter_mut().enumerate() {
            let n = sensor.normal();
            *v = (1.0 - sc) * *v + s.cam_noise * (1.0 + sc) * n + sc * self.world.cam_artifact[i % s.c];
        }
        let mut lidar = clean.lidar;
        for y in 0..s.h {
            for x in 0..s.w {
                let dropped = self.is_dropped(&layout, y, x);
                for ch in 0..s.c {
                    let n = sensor.normal();
                    let i = (y * s.w + x) * s.c + ch;
                    lidar.data_mut()[i] = if dropped {
                        0.0
                    } else {
                        (1.0 - sl) * lidar.data()[i] + s.lidar_noise * (1.0 + sl) * n + sl * self.world.lidar_artifact[ch]
                    };
                }
            }
        }
        Scene {
            index,
            cam,
            lidar,
            masks: clean.masks,
            spec: s.clone(),
            layout,
        }
    }

    /// Lazily generates the scenes with the given indices.
    pub fn scenes(&self, indices: Range<u64>) -> impl Iterator<Item = Scene> + '_ {
        indices.map(move |i| self.scene(i))
    }

    /// `n` held-out scenes, disjoint from any training index below
    /// [`HELDOUT_OFFSET`].
    pub fn heldout(&self, n: usize) -> Vec<Scene> {
        self.scenes(HELDOUT_OFFSET..HELDOUT_OFFSET + n as u64).collect()
    }
}

/// The first `n` training scenes of `spec`.
pub fn generate(spec: &SceneSpec, n: usize) -> Result<Vec<Scene>> {
    let g = SceneGenerator::new(spec.clone())?;
    Ok(g.scenes(0..n as u64).collect())
}

const EXPORT_MAGIC: &[u8; 4] = b"BEVS";
const EXPORT_VERSION: u32 = 1;

/// Scene batch read back from an export. Values have been through f32.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedBatch {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub seed: u64,
    /// (cam, lidar, masks) per scene, shaped like [`Scene`]'s fields.
    pub scenes: Vec<(Tensor, Tensor, Tensor)>,
}

fn write_planes(out: &mut impl Write, t: &Tensor) -> Result<()> {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut buf = Vec::with_capacity(t.len() * 4);
    for ch in 0..c {
        for p in 0..h * w {
            buf.extend_from_slice(&(t.data()[p * c + ch] as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_planes(inp: &mut impl Read, h: usize, w: usize, c: usize) -> Result<Tensor> {
    let mut buf = vec![0u8; h * w * c * 4];
    inp.read_exact(&mut buf)
        .map_err(|e| Error::Load(format!("truncated scene payload: {e}")))?;
    let mut t = Tensor::zeros(&[h, w, c]);
    for ch in 0..c {
        for p in 0..h * w {
            let o = (ch * h * w + p) * 4;
            let v = f32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
            t.data_mut()[p * c + ch] = v as f64;
        }
    }
    Ok(t)
}

/// Writes a scene batch: magic `BEVS`, version, H, W, C, K (u32), seed
/// (u64), scene count (u32), then per scene the camera, LiDAR and mask
/// planes as little-endian f32, channel-major.
pub fn export_scenes(out: &mut impl Write, spec: &SceneSpec, scenes: &[Scene]) -> Result<()> {
    let mut head = Vec::new();
    head.extend_from_slice(EXPORT_MAGIC);
    head.extend_from_slice(&EXPORT_VERSION.to_le_bytes());
    for v in [spec.h, spec.w, spec.c, spec.k] {
        head.extend_from_slice(&(v as u32).to_le_bytes());
    }
    head.extend_from_slice(&spec.seed.to_le_bytes());
    head.extend_from_slice(&(scenes.len() as u32).to_le_bytes());
    out.write_all(&head)?;
    for s in scenes {
        if s.spec.h != spec.h || s.spec.w != spec.w || s.spec.c != spec.c || s.spec.k != spec.k {
            return Err(Error::Input("scene extents differ from the export header".into()));
        }
        write_planes(out, &s.cam)?;
        write_planes(out, &s.lidar)?;
        write_planes(out, &s.masks)?;
    }
    Ok(())
}

pub fn import_scenes(inp: &mut impl Read) -> Result<ExportedBatch> {
    let mut head = [0u8; 36];
    inp.read_exact(&mut head)
        .map_err(|e| Error::Load(format!("truncated scene header: {e}")))?;
    if &head[0..4] != EXPORT_MAGIC {
        return Err(Error::Load("not a scene export (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != EXPORT_VERSION {
        return Err(Error::Load(format!("unsupported scene export version {version}")));
    }
    let (h, w, c, k) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
    let seed = u64::from_le_bytes(head[24..32].try_into().unwrap());
    let count = u32_at(32) as usize;
    if h == 0 || w == 0 || c == 0 || k == 0 {
        return Err(Error::Load("zero extent in scene export header".into()));
    }
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let cam = read_planes(inp, h, w, c)?;
        let lidar = read_planes(inp, h, w, c)?;
        let masks = read_planes(inp, h, w, k)?;
        scenes.push((cam, lidar, masks));
    }
    Ok(ExportedBatch {
        h,
        w,
        c,
        k,
        seed,
        scenes,
    })
}
