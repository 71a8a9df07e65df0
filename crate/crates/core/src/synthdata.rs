//! Synthetic detection scenes: colored axis-aligned rectangles on a blank
//! canvas, cut into patch tokens.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::iou;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Square canvas side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Box side range in pixels.
    pub min_side: usize,
    pub max_side: usize,
    /// Largest IoU allowed between two ground-truth boxes.
    pub max_iou: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            classes: 3,
            min_objects: 1,
            max_objects: 5,
            min_side: 8,
            max_side: 24,
            max_iou: 0.3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.classes == 0 {
            return bad("need at least one class".into());
        }
        if self.min_objects > self.max_objects {
            return bad(format!(
                "object range [{}, {}] is empty",
                self.min_objects, self.max_objects
            ));
        }
        if self.min_side == 0 || self.min_side > self.max_side || self.max_side > self.image_size {
            return bad(format!(
                "box side range [{}, {}] does not fit a {}px image",
                self.min_side, self.max_side, self.image_size
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per patch token (RGB).
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Ground truth of one image. Boxes are normalized `cx, cy, w, h`; classes run `1..=c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

impl Scene {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            boxes: Vec::new(),
            classes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Seed of scene `index` in a dataset seeded with `seed` (SplitMix64 finalizer).
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate(spec: &SceneSpec, count: usize) -> Result<Vec<Scene>> {
    spec.validate()?;
    Ok((0..count)
        .map(|i| generate_scene(spec, scene_seed(spec.seed, i as u64)))
        .collect())
}

/// Builds one scene from its own seed.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target = rng.gen_range(spec.min_objects..=spec.max_objects);
    let size = spec.image_size;
    loop {
        let mut pixel_boxes: Vec<[usize; 4]> = Vec::with_capacity(target);
        let mut boxes = Vec::with_capacity(target);
        let mut classes = Vec::with_capacity(target);
        let mut failed = false;
        while boxes.len() < target {
            let mut placed = false;
            for _ in 0..MAX_ATTEMPTS {
                let w = rng.gen_range(spec.min_side..=spec.max_side);
                let h = rng.gen_range(spec.min_side..=spec.max_side);
                let x0 = rng.gen_range(0..=size - w);
                let y0 = rng.gen_range(0..=size - h);
                let cand = to_cxcywh([x0, y0, w, h], size);
                if boxes.iter().all(|&b| iou(b, cand) <= spec.max_iou) {
                    pixel_boxes.push([x0, y0, w, h]);
                    boxes.push(cand);
                    classes.push(rng.gen_range(1..=spec.classes));
                    placed = true;
                    break;
                }
            }
            if !placed {
                failed = true;
                break;
            }
        }
        if !failed || target == 0 {
            return Scene {
                seed,
                boxes,
                classes,
            };
        }
        target -= 1;
    }
}

fn to_cxcywh([x0, y0, w, h]: [usize; 4], size: usize) -> [f64; 4] {
    let s = size as f64;
    [
        (x0 as f64 + w as f64 / 2.0) / s,
        (y0 as f64 + h as f64 / 2.0) / s,
        w as f64 / s,
        h as f64 / s,
    ]
}

pub const BACKGROUND: [f64; 3] = [0.0, 0.0, 0.0];

/// Fill color of class `c` (1-based).
pub fn class_color(c: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.2, 0.4, 1.0],
        [1.0, 1.0, 0.2],
        [1.0, 0.2, 1.0],
        [0.2, 1.0, 1.0],
    ];
    if (1..=PALETTE.len()).contains(&c) {
        PALETTE[c - 1]
    } else {
        let t = (c as f64 * 0.618_033_988_75).fract();
        [t, 1.0 - t, (2.0 * t).fract()]
    }
}

/// Renders the scene to an `S×S×3` image, row-major, channel last.
/// Later objects paint over earlier ones.
pub fn render_image(scene: &Scene, spec: &SceneSpec) -> Vec<f64> {
    let s = spec.image_size;
    let mut img = Vec::with_capacity(s * s * 3);
    for _ in 0..s * s {
        img.extend_from_slice(&BACKGROUND);
    }
    let sf = s as f64;
    for (b, &c) in scene.boxes.iter().zip(&scene.classes) {
        let color = class_color(c);
        let (x0, x1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
        let (y0, y1) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
        for py in 0..s {
            let y = (py as f64 + 0.5) / sf;
            if y < y0 || y >= y1 {
                continue;
            }
            for px in 0..s {
                let x = (px as f64 + 0.5) / sf;
                if x >= x0 && x < x1 {
                    img[(py * s + px) * 3..(py * s + px) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    img
}

/// Cuts the rendered image into row-major patches: an `m × 3p²` token matrix.
pub fn render_tokens<T: Scalar>(scene: &Scene, spec: &SceneSpec) -> Tensor<T> {
    let img = render_image(scene, spec);
    let (s, p, grid) = (spec.image_size, spec.patch_size, spec.grid());
    let mut out = Vec::with_capacity(spec.tokens() * spec.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..p {
                let row = gy * p + py;
                let start = (row * s + gx * p) * 3;
                out.extend(img[start..start + 3 * p].iter().map(|&v| T::lit(v)));
            }
        }
    }
    Tensor::new(&[spec.tokens(), spec.patch_dim()], out).expect("token grid shape")
}

pub fn save(scenes: &[Scene], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        let line = serde_json::to_string(s).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Scene>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_lines(BufReader::new(file))
}

pub fn parse_lines(reader: impl BufRead) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if scene.boxes.len() != scene.classes.len() {
            return Err(Error::Format(format!(
                "line {}: {} boxes but {} classes",
                i + 1,
                scene.boxes.len(),
                scene.classes.len()
            )));
        }
        scenes.push(scene);
    }
    Ok(scenes)
}
