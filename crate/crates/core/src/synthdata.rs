//! Synthetic multi-frame sequences with exact ground-truth flows.
//!
//! A scene is a textured background plus textured sprites, each layer moving
//! rigidly under a closed-form transform `A_t(p) = c + t·T + R(tθ)·p` that
//! maps layer-local coordinates `p` to image coordinates at frame `t`.
//! Pixel `(row, col)` sits at image coordinates `(x, y) = (col, row)`.
//! Ground truth for a pixel owned by layer `i` is `A_{t±1}(A_t⁻¹(x)) − x`,
//! defined whether or not the target is visible.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowio::{read_flo, read_frame, read_mask, write_flo, write_frame, write_mask};
use crate::tensor::Tensor;

/// Per-frame rigid motion: translation in pixels and rotation in radians
/// about the layer center.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: Shape,
    /// Center at frame 0, image coordinates.
    pub center: [f64; 2],
    /// Half width and half height (ellipse semi-axes).
    pub half_extent: [f64; 2],
    pub texture_seed: u64,
    /// Higher is nearer; ties go to the later sprite.
    pub depth: i32,
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background_seed: u64,
    /// Motion of the background about the image center.
    pub background_motion: Motion,
    /// Texture cell size in pixels.
    pub texture_scale: f64,
    pub sprites: Vec<Sprite>,
    pub seed: u64,
}

/// A generated sequence. Flow and mask vectors are indexed by center
/// frame: entry `i` belongs to frame `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub spec: SceneSpec,
    /// `3×H×W` in `[0, 1]`, quantized to 8 bits.
    pub frames: Vec<Tensor<f32>>,
    /// `f_{t→t+1}`
    pub gt_fwd: Vec<Tensor<f32>>,
    /// `f_{t→t−1}`
    pub gt_bwd: Vec<Tensor<f32>>,
    /// Flows are defined everywhere, so this is all true.
    pub valid: Vec<bool>,
    pub occl_fwd: Vec<Vec<bool>>,
    pub occl_bwd: Vec<Vec<bool>>,
}

impl SyntheticSequence {
    pub fn centers(&self) -> usize {
        self.gt_fwd.len()
    }
}

const TEXTURE_PERIOD: usize = 16;

/// Periodic RGB lattice sampled bilinearly.
struct Texture {
    cells: Vec<[f32; 3]>,
    scale: f64,
}

impl Texture {
    fn new(seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
        let cells = (0..TEXTURE_PERIOD * TEXTURE_PERIOD)
            .map(|_| std::array::from_fn(|c| (base[c] + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0)))
            .collect();
        Texture { cells, scale }
    }

    fn sample(&self, p: [f64; 2]) -> [f32; 3] {
        let n = TEXTURE_PERIOD as f64;
        let (u, v) = (p[0] / self.scale, p[1] / self.scale);
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = ((u - u0) as f32, (v - v0) as f32);
        let wrap = |a: f64| (a.rem_euclid(n)) as usize;
        let (i0, j0) = (wrap(u0), wrap(v0));
        let (i1, j1) = ((i0 + 1) % TEXTURE_PERIOD, (j0 + 1) % TEXTURE_PERIOD);
        let at = |i: usize, j: usize| self.cells[j * TEXTURE_PERIOD + i];
        let (a, b, c, d) = (at(i0, j0), at(i1, j0), at(i0, j1), at(i1, j1));
        std::array::from_fn(|k| {
            (1.0 - fv) * ((1.0 - fu) * a[k] + fu * b[k]) + fv * ((1.0 - fu) * c[k] + fu * d[k])
        })
    }
}

/// Layer index within a scene: the background or a sprite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Background,
    Sprite(usize),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(Error::InvalidArgument(format!("a sequence needs at least 3 frames, got {}", self.frames)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        if self.texture_scale.is_nan() || self.texture_scale <= 0.0 {
            return Err(Error::InvalidArgument("texture scale must be positive".into()));
        }
        let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
        for (i, s) in self.sprites.iter().enumerate() {
            let [a, b] = s.half_extent;
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::InvalidArgument(format!("sprite {i} is degenerate (zero area)")));
            }
            let [cx, cy] = s.center;
            if cx - a < 0.0 || cx + a > w || cy - b < 0.0 || cy + b > h {
                return Err(Error::InvalidArgument(format!("sprite {i} does not start inside the image")));
            }
        }
        Ok(())
    }

    fn origin(&self, layer: Layer) -> ([f64; 2], Motion) {
        match layer {
            Layer::Background => {
                ([(self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0], self.background_motion)
            }
            Layer::Sprite(i) => (self.sprites[i].center, self.sprites[i].motion),
        }
    }

    /// `A_t(p)` of a layer.
    pub fn to_image(&self, layer: Layer, t: f64, p: [f64; 2]) -> [f64; 2] {
        let (c, m) = self.origin(layer);
        let (s, co) = (m.theta * t).sin_cos();
        [c[0] + t * m.tx + co * p[0] - s * p[1], c[1] + t * m.ty + s * p[0] + co * p[1]]
    }

    /// `A_t⁻¹(x)` of a layer.
    pub fn to_local(&self, layer: Layer, t: f64, x: [f64; 2]) -> [f64; 2] {
        let (c, m) = self.origin(layer);
        let (s, co) = (m.theta * t).sin_cos();
        let (dx, dy) = (x[0] - c[0] - t * m.tx, x[1] - c[1] - t * m.ty);
        [co * dx + s * dy, -s * dx + co * dy]
    }

    fn contains(&self, i: usize, t: f64, x: [f64; 2]) -> bool {
        let s = &self.sprites[i];
        let p = self.to_local(Layer::Sprite(i), t, x);
        let (u, v) = (p[0] / s.half_extent[0], p[1] / s.half_extent[1]);
        match s.shape {
            Shape::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Ellipse => u * u + v * v <= 1.0,
        }
    }

    /// Sprite indices from nearest to farthest.
    fn front_to_back(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.sprites.len()).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(self.sprites[i].depth), std::cmp::Reverse(i)));
        order
    }

    /// Visible layer at image point `x` at time `t`.
    pub fn owner(&self, t: f64, x: [f64; 2]) -> Layer {
        self.front_to_back()
            .into_iter()
            .find(|&i| self.contains(i, t, x))
            .map_or(Layer::Background, Layer::Sprite)
    }

    /// Displacement of the point of `layer` at `x`, time `from`, to time `to`.
    pub fn displacement(&self, layer: Layer, from: f64, to: f64, x: [f64; 2]) -> [f64; 2] {
        let y = self.to_image(layer, to, self.to_local(layer, from, x));
        [y[0] - x[0], y[1] - x[1]]
    }

    fn in_frame(&self, x: [f64; 2]) -> bool {
        (0.0..=(self.width - 1) as f64).contains(&x[0]) && (0.0..=(self.height - 1) as f64).contains(&x[1])
    }
}

fn quantize(x: f32) -> f32 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders the frames, ground-truth flows and occlusion masks of a scene.
pub fn generate_sequence(spec: &SceneSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let background = Texture::new(spec.background_seed, spec.texture_scale);
    let textures: Vec<Texture> = spec.sprites.iter().map(|s| Texture::new(s.texture_seed, spec.texture_scale)).collect();
    let pixel = |i: usize| [(i % w) as f64, (i / w) as f64];

    let mut owners = Vec::with_capacity(spec.frames);
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let tf = t as f64;
        let own: Vec<Layer> = (0..n).map(|i| spec.owner(tf, pixel(i))).collect();
        let mut data = vec![0f32; 3 * n];
        for (i, &layer) in own.iter().enumerate() {
            let p = spec.to_local(layer, tf, pixel(i));
            let rgb = match layer {
                Layer::Background => background.sample(p),
                Layer::Sprite(s) => textures[s].sample(p),
            };
            for c in 0..3 {
                data[c * n + i] = quantize(rgb[c]);
            }
        }
        frames.push(Tensor::new([3, h, w], data)?);
        owners.push(own);
    }

    let centers = spec.frames - 2;
    let mut gt = [Vec::with_capacity(centers), Vec::with_capacity(centers)];
    let mut occl = [Vec::with_capacity(centers), Vec::with_capacity(centers)];
    for t in 1..=centers {
        for (d, to) in [(0, t + 1), (1, t - 1)] {
            let mut flow = vec![0f32; 2 * n];
            let mut mask = vec![false; n];
            for i in 0..n {
                let layer = owners[t][i];
                let x = pixel(i);
                let f = spec.displacement(layer, t as f64, to as f64, x);
                flow[i] = f[0] as f32;
                flow[n + i] = f[1] as f32;
                let target = [x[0] + f[0], x[1] + f[1]];
                mask[i] = !spec.in_frame(target) || spec.owner(to as f64, target) != layer;
            }
            gt[d].push(Tensor::new([2, h, w], flow)?);
            occl[d].push(mask);
        }
    }
    let [gt_fwd, gt_bwd] = gt;
    let [occl_fwd, occl_bwd] = occl;
    Ok(SyntheticSequence { spec: spec.clone(), frames, gt_fwd, gt_bwd, valid: vec![true; n], occl_fwd, occl_bwd })
}

/// Parameters scenes are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDistribution {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    /// Largest sprite translation magnitude, pixels per frame.
    pub max_translation: f64,
    /// Largest sprite rotation, radians per frame.
    pub max_rotation: f64,
    /// Largest background translation magnitude, pixels per frame.
    pub max_background_translation: f64,
    /// Sprite half extents as a fraction of the smaller image side.
    pub min_extent: f64,
    pub max_extent: f64,
    pub texture_scale: f64,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        SceneDistribution {
            width: 64,
            height: 64,
            frames: 5,
            min_sprites: 1,
            max_sprites: 3,
            max_translation: 6.0,
            max_rotation: 0.05,
            max_background_translation: 0.0,
            min_extent: 0.12,
            max_extent: 0.25,
            texture_scale: 3.0,
        }
    }
}

fn random_translation(rng: &mut ChaCha8Rng, max: f64) -> (f64, f64) {
    if max <= 0.0 {
        return (0.0, 0.0);
    }
    let r = max * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    (r * a.cos(), r * a.sin())
}

impl SceneDistribution {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames < 3 {
            return bad("data.frames must be at least 3");
        }
        if self.width < 8 || self.height < 8 {
            return bad("data.width and data.height must be at least 8");
        }
        if self.min_sprites > self.max_sprites {
            return bad("data.min_sprites exceeds data.max_sprites");
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent && self.max_extent < 0.5) {
            return bad("sprite extents must satisfy 0 < min_extent ≤ max_extent < 0.5");
        }
        if self.texture_scale.is_nan() || self.texture_scale <= 0.0 {
            return bad("data.texture_scale must be positive");
        }
        Ok(())
    }

    /// Draws one scene.
    pub fn sample(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = self.width.min(self.height) as f64;
        let count = rng.random_range(self.min_sprites..=self.max_sprites);
        let mut sprites = Vec::with_capacity(count);
        for depth in 0..count {
            let half_extent = [
                side * rng.random_range(self.min_extent..=self.max_extent),
                side * rng.random_range(self.min_extent..=self.max_extent),
            ];
            let center = [
                rng.random_range(half_extent[0]..=(self.width - 1) as f64 - half_extent[0]),
                rng.random_range(half_extent[1]..=(self.height - 1) as f64 - half_extent[1]),
            ];
            let shape = if rng.random::<bool>() { Shape::Rectangle } else { Shape::Ellipse };
            let (tx, ty) = random_translation(&mut rng, self.max_translation);
            let theta = if self.max_rotation > 0.0 { rng.random_range(-self.max_rotation..=self.max_rotation) } else { 0.0 };
            sprites.push(Sprite {
                shape,
                center,
                half_extent,
                texture_seed: rng.random(),
                depth: depth as i32 + 1,
                motion: Motion { tx, ty, theta },
            });
        }
        let (tx, ty) = random_translation(&mut rng, self.max_background_translation);
        SceneSpec {
            width: self.width,
            height: self.height,
            frames: self.frames,
            background_seed: rng.random(),
            background_motion: Motion { tx, ty, theta: 0.0 },
            texture_scale: self.texture_scale,
            sprites,
            seed,
        }
    }
}

/// Seed of sequence `index` in a dataset drawn with `seed`.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

/// Generates `count` sequences deterministically from `seed`.
pub fn make_dataset(dist: &SceneDistribution, count: usize, seed: u64) -> Result<Vec<SyntheticSequence>> {
    dist.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("dataset count must be at least 1".into()));
    }
    (0..count).into_par_iter().map(|i| generate_sequence(&dist.sample(sequence_seed(seed, i)))).collect()
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    count: usize,
    seed: u64,
    distribution: SceneDistribution,
}

fn sequence_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("seq_{index:04}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Writes one sequence directory.
pub fn write_sequence(dir: &Path, seq: &SyntheticSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("meta.json"), &seq.spec)?;
    let (h, w) = (seq.spec.height, seq.spec.width);
    for (t, f) in seq.frames.iter().enumerate() {
        write_frame(dir.join(format!("frame_{t:02}.png")), f)?;
    }
    for i in 0..seq.centers() {
        let t = i + 1;
        write_flo(dir.join(format!("fwd_{t:02}.flo")), &seq.gt_fwd[i])?;
        write_flo(dir.join(format!("bwd_{t:02}.flo")), &seq.gt_bwd[i])?;
        write_mask(dir.join(format!("occl_fwd_{t:02}.png")), &seq.occl_fwd[i], h, w)?;
        write_mask(dir.join(format!("occl_bwd_{t:02}.png")), &seq.occl_bwd[i], h, w)?;
    }
    Ok(())
}

/// Generates and writes a dataset: `seq_%04d/` directories plus a
/// top-level `dataset.json`.
pub fn write_dataset(root: &Path, dist: &SceneDistribution, count: usize, seed: u64) -> Result<()> {
    let seqs = make_dataset(dist, count, seed)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_json(&root.join("dataset.json"), &DatasetManifest { count, seed, distribution: dist.clone() })?;
    seqs.par_iter().enumerate().try_for_each(|(i, s)| write_sequence(&sequence_dir(root, i), s))
}

/// Reads a sequence directory written by [`write_sequence`].
pub fn read_sequence(dir: &Path) -> Result<SyntheticSequence> {
    let spec: SceneSpec = read_json(&dir.join("meta.json"))?;
    spec.validate()?;
    let frames = (0..spec.frames)
        .map(|t| read_frame(dir.join(format!("frame_{t:02}.png"))))
        .collect::<Result<Vec<_>>>()?;
    let centers = spec.frames - 2;
    let (mut gt_fwd, mut gt_bwd, mut occl_fwd, mut occl_bwd) = (vec![], vec![], vec![], vec![]);
    for t in 1..=centers {
        gt_fwd.push(read_flo(dir.join(format!("fwd_{t:02}.flo")))?);
        gt_bwd.push(read_flo(dir.join(format!("bwd_{t:02}.flo")))?);
        occl_fwd.push(read_mask(dir.join(format!("occl_fwd_{t:02}.png")))?.0);
        occl_bwd.push(read_mask(dir.join(format!("occl_bwd_{t:02}.png")))?.0);
    }
    let valid = vec![true; spec.width * spec.height];
    Ok(SyntheticSequence { spec, frames, gt_fwd, gt_bwd, valid, occl_fwd, occl_bwd })
}

/// Reads every sequence of a dataset written by [`write_dataset`], in order.
pub fn read_dataset(root: &Path) -> Result<Vec<SyntheticSequence>> {
    let manifest: DatasetManifest = read_json(&root.join("dataset.json"))?;
    (0..manifest.count).into_par_iter().map(|i| read_sequence(&sequence_dir(root, i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still(width: usize, height: usize, frames: usize) -> SceneSpec {
        SceneSpec {
            width,
            height,
            frames,
            background_seed: 5,
            background_motion: Motion::default(),
            texture_scale: 3.0,
            sprites: vec![],
            seed: 0,
        }
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let seq = generate_sequence(&still(12, 10, 3)).unwrap();
        assert_eq!(seq.centers(), 1);
        assert!(seq.gt_fwd[0].data().iter().chain(seq.gt_bwd[0].data()).all(|&v| v == 0.0));
        assert!(seq.occl_fwd[0].iter().chain(&seq.occl_bwd[0]).all(|&o| !o));
        assert!(seq.frames[0].bit_identical(&seq.frames[2]));
    }

    #[test]
    fn translating_background_gives_constant_flow() {
        let mut spec = still(12, 10, 4);
        spec.background_motion = Motion { tx: 2.0, ty: 1.0, theta: 0.0 };
        let seq = generate_sequence(&spec).unwrap();
        for i in 0..seq.centers() {
            assert!(seq.gt_fwd[i].channel(0).iter().all(|&v| v == 2.0));
            assert!(seq.gt_fwd[i].channel(1).iter().all(|&v| v == 1.0));
            assert!(seq.gt_bwd[i].channel(0).iter().all(|&v| v == -2.0));
            assert!(seq.gt_bwd[i].channel(1).iter().all(|&v| v == -1.0));
            // the right two columns and the bottom row leave the frame
            let occluded = seq.occl_fwd[i].iter().filter(|&&o| o).count();
            assert_eq!(occluded, 2 * 10 + 10);
        }
    }

    #[test]
    fn rejects_bad_scenes() {
        assert!(generate_sequence(&still(8, 8, 2)).is_err());
        let mut spec = still(20, 20, 3);
        spec.sprites.push(Sprite {
            shape: Shape::Rectangle,
            center: [10.0, 10.0],
            half_extent: [0.0, 3.0],
            texture_seed: 1,
            depth: 1,
            motion: Motion::default(),
        });
        assert!(generate_sequence(&spec).is_err());
        spec.sprites[0].half_extent = [12.0, 3.0];
        assert!(generate_sequence(&spec).is_err());
    }

    #[test]
    fn transforms_invert() {
        let mut spec = still(30, 20, 3);
        spec.background_motion = Motion { tx: 1.5, ty: -0.5, theta: 0.1 };
        let x = [3.25, 7.5];
        let p = spec.to_local(Layer::Background, 2.0, x);
        let y = spec.to_image(Layer::Background, 2.0, p);
        assert!((y[0] - x[0]).abs() < 1e-12 && (y[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seeded() {
        let d = SceneDistribution::default();
        assert_eq!(d.sample(4), d.sample(4));
        assert_ne!(d.sample(4), d.sample(5));
        assert_ne!(sequence_seed(1, 0), sequence_seed(1, 1));
        d.sample(4).validate().unwrap();
    }
}
