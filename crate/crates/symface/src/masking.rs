//! Mask generation: free-form training masks (strokes + rectangles with a
//! target hole fraction), organ masks, morphological growth toward a half
//! face, half-face masks and the K x K block masks the influence sweep uses.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::derive_seed;
use crate::toyfaces::{Part, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    /// Columns c < midline are left, c >= midline are right.
    pub fn contains_col(self, c: usize, midline: usize) -> bool {
        match self {
            Side::Left => c < midline,
            Side::Right => c >= midline,
        }
    }
}

/// Binary hole map; 1 marks a pixel to inpaint.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub grid: Array2<u8>,
    pub spec_tag: String,
}

impl Mask {
    pub fn new(grid: Array2<u8>, spec_tag: impl Into<String>) -> Result<Self> {
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::Parameter("mask values must be 0 or 1".into()));
        }
        Ok(Mask {
            grid,
            spec_tag: spec_tag.into(),
        })
    }

    pub fn hole_count(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1).count()
    }

    pub fn hole_fraction(&self) -> f64 {
        self.hole_count() as f64 / self.grid.len() as f64
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.grid
            .iter()
            .zip(other.grid.iter())
            .all(|(a, b)| *a == 0 || *b == 1)
    }

    pub fn overlaps(&self, other: &Mask) -> bool {
        self.grid
            .iter()
            .zip(other.grid.iter())
            .any(|(a, b)| *a == 1 && *b == 1)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.grid.dim() != other.grid.dim() {
            return Err(Error::Shape(format!(
                "mask union {:?} vs {:?}",
                self.grid.dim(),
                other.grid.dim()
            )));
        }
        let grid = Array2::from_shape_fn(self.grid.dim(), |ix| {
            u8::from(self.grid[ix] == 1 || other.grid[ix] == 1)
        });
        Mask::new(grid, format!("{}+{}", self.spec_tag, other.spec_tag))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Aggressive,
    Narrow,
    Medium,
    Wide,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Aggressive => "aggressive",
            MaskKind::Narrow => "narrow",
            MaskKind::Medium => "medium",
            MaskKind::Wide => "wide",
        }
    }

    pub fn from_name(name: &str) -> Result<MaskKind> {
        Ok(match name {
            "aggressive" => MaskKind::Aggressive,
            "narrow" => MaskKind::Narrow,
            "medium" => MaskKind::Medium,
            "wide" => MaskKind::Wide,
            other => return Err(Error::Parameter(format!("unknown mask kind `{other}`"))),
        })
    }
}

/// Free-form mask recipe: stroke/rectangle counts and sizes plus target
/// hole-fraction bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub strokes: (usize, usize),
    pub thickness: (usize, usize),
    pub rects: (usize, usize),
    /// Rectangle side lengths as a fraction of the image side.
    pub rect_frac: (f64, f64),
    /// Inclusive hole-fraction bounds [lo, hi].
    pub fraction: (f64, f64),
}

impl MaskSpec {
    pub fn narrow() -> Self {
        MaskSpec {
            kind: MaskKind::Narrow,
            strokes: (1, 4),
            thickness: (2, 6),
            rects: (0, 0),
            rect_frac: (0.15, 0.3),
            fraction: (0.02, 0.15),
        }
    }

    pub fn medium() -> Self {
        MaskSpec {
            kind: MaskKind::Medium,
            strokes: (2, 6),
            thickness: (6, 14),
            rects: (0, 2),
            rect_frac: (0.15, 0.3),
            fraction: (0.10, 0.35),
        }
    }

    pub fn wide() -> Self {
        MaskSpec {
            kind: MaskKind::Wide,
            strokes: (3, 8),
            thickness: (10, 20),
            rects: (1, 3),
            rect_frac: (0.2, 0.35),
            fraction: (0.25, 0.55),
        }
    }

    /// Per-sample uniform choice among the three presets; the fraction
    /// bounds are the envelope of the three.
    pub fn aggressive() -> Self {
        MaskSpec {
            kind: MaskKind::Aggressive,
            strokes: (1, 8),
            thickness: (2, 20),
            rects: (0, 3),
            rect_frac: (0.15, 0.35),
            fraction: (0.02, 0.55),
        }
    }

    pub fn preset(kind: MaskKind) -> Self {
        match kind {
            MaskKind::Narrow => Self::narrow(),
            MaskKind::Medium => Self::medium(),
            MaskKind::Wide => Self::wide(),
            MaskKind::Aggressive => Self::aggressive(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.fraction;
        if !(0.0..=0.9).contains(&lo) || !(0.0..=0.9).contains(&hi) || lo >= hi {
            return Err(Error::Parameter(format!(
                "mask fraction bounds must satisfy 0 <= lo < hi <= 0.9, got [{lo}, {hi}]"
            )));
        }
        for (what, (a, b)) in [
            ("strokes", self.strokes),
            ("thickness", self.thickness),
            ("rects", self.rects),
        ] {
            if a > b {
                return Err(Error::Parameter(format!("empty {what} range {a}..={b}")));
            }
        }
        if self.strokes.1 == 0 && self.rects.1 == 0 {
            return Err(Error::Parameter("spec can never paint a hole".into()));
        }
        Ok(())
    }
}

const MAX_MASK_ATTEMPTS: usize = 100;

fn paint_disc(grid: &mut Array2<u8>, cy: f64, cx: f64, radius: f64) {
    let (h, w) = grid.dim();
    let r0 = ((cy - radius).floor().max(0.0)) as usize;
    let r1 = ((cy + radius).ceil().min(h as f64 - 1.0)) as usize;
    let c0 = ((cx - radius).floor().max(0.0)) as usize;
    let c1 = ((cx + radius).ceil().min(w as f64 - 1.0)) as usize;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            if dy * dy + dx * dx <= radius * radius {
                grid[[r, c]] = 1;
            }
        }
    }
}

fn paint_attempt(spec: &MaskSpec, rng: &mut ChaCha8Rng, size: usize) -> Array2<u8> {
    let s = size as f64;
    let total = (size * size) as f64;
    let mut grid = Array2::<u8>::zeros((size, size));
    // stop adding elements once close to the upper fraction bound, so the
    // fixed pixel thicknesses also work on small images
    let cap = spec.fraction.1 * 0.98;
    let frac = |g: &Array2<u8>| g.iter().filter(|&&v| v == 1).count() as f64 / total;
    let n_strokes = rng.gen_range(spec.strokes.0..=spec.strokes.1);
    for _ in 0..n_strokes {
        let thickness = rng.gen_range(spec.thickness.0..=spec.thickness.1) as f64;
        let radius = (thickness / 2.0).max(0.5);
        let mut y = rng.gen_range(0.0..s);
        let mut x = rng.gen_range(0.0..s);
        let mut angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let n_segs = rng.gen_range(1..=4);
        for _ in 0..n_segs {
            let len = rng.gen_range(0.15..0.5) * s;
            let steps = len.ceil() as usize;
            for _ in 0..steps {
                paint_disc(&mut grid, y, x, radius);
                y += angle.sin();
                x += angle.cos();
                y = y.clamp(0.0, s - 1.0);
                x = x.clamp(0.0, s - 1.0);
            }
            angle += rng.gen_range(-1.0..1.0);
        }
        if frac(&grid) >= cap {
            return grid;
        }
    }
    let n_rects = rng.gen_range(spec.rects.0..=spec.rects.1);
    for _ in 0..n_rects {
        let rw = ((rng.gen_range(spec.rect_frac.0..spec.rect_frac.1) * s) as usize).max(1);
        let rh = ((rng.gen_range(spec.rect_frac.0..spec.rect_frac.1) * s) as usize).max(1);
        let r0 = rng.gen_range(0..size.saturating_sub(rh).max(1));
        let c0 = rng.gen_range(0..size.saturating_sub(rw).max(1));
        for r in r0..(r0 + rh).min(size) {
            for c in c0..(c0 + rw).min(size) {
                grid[[r, c]] = 1;
            }
        }
        if frac(&grid) >= cap {
            return grid;
        }
    }
    grid
}

/// Draw a free-form mask: strokes plus rectangles, resampled until the hole
/// fraction lands inside the spec bounds (bounded retries). Deterministic
/// per (spec, seed, size).
pub fn random_mask(spec: &MaskSpec, seed: u64, size: usize) -> Result<Mask> {
    spec.validate()?;
    let effective = if spec.kind == MaskKind::Aggressive {
        let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xA66, 0));
        let chosen = match pick.gen_range(0..3u8) {
            0 => MaskKind::Narrow,
            1 => MaskKind::Medium,
            _ => MaskKind::Wide,
        };
        let mut preset = MaskSpec::preset(chosen);
        // the aggressive envelope may have been customised; keep the
        // narrower preset bounds so the result is in-envelope either way
        preset.fraction.0 = preset.fraction.0.max(spec.fraction.0);
        preset.fraction.1 = preset.fraction.1.min(spec.fraction.1);
        preset
    } else {
        spec.clone()
    };
    let (lo, hi) = effective.fraction;
    let total = (size * size) as f64;
    let mut best = f64::NAN;
    let mut best_dist = f64::INFINITY;
    for attempt in 0..MAX_MASK_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, attempt as u64));
        let grid = paint_attempt(&effective, &mut rng, size);
        let frac = grid.iter().filter(|&&v| v == 1).count() as f64 / total;
        if frac >= lo && frac <= hi {
            return Mask::new(
                grid,
                format!("{}:seed={seed}:size={size}", effective.kind.name()),
            );
        }
        let dist = if frac < lo { lo - frac } else { frac - hi };
        if dist < best_dist {
            best_dist = dist;
            best = frac;
        }
    }
    Err(Error::MaskGeneration {
        achieved: best,
        lo,
        hi,
        attempts: MAX_MASK_ATTEMPTS,
    })
}

/// 4-connected components of a binary mask, in scan order.
pub fn connected_components(mask: &Array2<u8>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::<u8>::zeros((h, w));
    let mut components = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] != 1 || seen[[r, c]] == 1 {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![(r, c)];
            seen[[r, c]] = 1;
            while let Some((cr, cc)) = stack.pop() {
                comp.push((cr, cc));
                let mut push = |nr: isize, nc: isize| {
                    if nr >= 0 && nr < h as isize && nc >= 0 && nc < w as isize {
                        let (nr, nc) = (nr as usize, nc as usize);
                        if mask[[nr, nc]] == 1 && seen[[nr, nc]] == 0 {
                            seen[[nr, nc]] = 1;
                            stack.push((nr, nc));
                        }
                    }
                };
                push(cr as isize - 1, cc as isize);
                push(cr as isize + 1, cc as isize);
                push(cr as isize, cc as isize - 1);
                push(cr as isize, cc as isize + 1);
            }
            components.push(comp);
        }
    }
    components
}

/// Bounding box (dilated by 2 px, clipped) of the organ component on the
/// requested side of the midline.
pub fn organ_mask(sample: &Sample, organ: Part, side: Side) -> Result<Mask> {
    if organ == Part::Background {
        return Err(Error::Parameter("background is not an organ".into()));
    }
    let mask = sample.parts.mask(organ);
    let mid = sample.midline_x;
    let comps = connected_components(&mask);
    let mut best: Option<(usize, &Vec<(usize, usize)>)> = None;
    for comp in &comps {
        let on_side = comp
            .iter()
            .filter(|(_, c)| side.contains_col(*c, mid))
            .count();
        if on_side == 0 {
            continue;
        }
        if best.map_or(true, |(n, _)| on_side > n) {
            best = Some((on_side, comp));
        }
    }
    let Some((_, comp)) = best else {
        return Err(Error::OrganNotFound {
            organ: organ.name().into(),
            side: side.name().into(),
        });
    };
    let size = sample.size();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for &(r, c) in comp {
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    let r0 = r0.saturating_sub(2);
    let c0 = c0.saturating_sub(2);
    let r1 = (r1 + 2).min(size - 1);
    let c1 = (c1 + 2).min(size - 1);
    let mut grid = Array2::<u8>::zeros((size, size));
    for r in r0..=r1 {
        for c in c0..=c1 {
            grid[[r, c]] = 1;
        }
    }
    Mask::new(
        grid,
        format!("organ:{}:{}", organ.name(), side.name()),
    )
}

/// Exact chessboard (L-infinity) distance to the nearest hole pixel,
/// via a two-pass 8-neighbor chamfer.
fn chebyshev_distance(mask: &Array2<u8>) -> Array2<u32> {
    let (h, w) = mask.dim();
    const INF: u32 = u32::MAX / 2;
    let mut d = Array2::<u32>::from_elem((h, w), INF);
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 1 {
                d[[r, c]] = 0;
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            let mut m = d[[r, c]];
            let mut probe = |rr: isize, cc: isize| {
                if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                    m = m.min(d[[rr as usize, cc as usize]] + 1);
                }
            };
            probe(r as isize - 1, c as isize - 1);
            probe(r as isize - 1, c as isize);
            probe(r as isize - 1, c as isize + 1);
            probe(r as isize, c as isize - 1);
            d[[r, c]] = m;
        }
    }
    for r in (0..h).rev() {
        for c in (0..w).rev() {
            let mut m = d[[r, c]];
            let mut probe = |rr: isize, cc: isize| {
                if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                    m = m.min(d[[rr as usize, cc as usize]] + 1);
                }
            };
            probe(r as isize + 1, c as isize + 1);
            probe(r as isize + 1, c as isize);
            probe(r as isize + 1, c as isize - 1);
            probe(r as isize, c as isize + 1);
            d[[r, c]] = m;
        }
    }
    d
}

/// Dilate the hole by `steps` pixels (square structuring element) and clip
/// to the face region on the hole's side of the midline; the original hole
/// is always kept. Monotone in `steps`; at saturation it equals the
/// half-face mask of that side.
pub fn grow_mask(mask: &Mask, steps: usize, sample: &Sample) -> Result<Mask> {
    if mask.grid.dim() != (sample.size(), sample.size()) {
        return Err(Error::Shape(format!(
            "mask {:?} vs sample size {}",
            mask.grid.dim(),
            sample.size()
        )));
    }
    if steps == 0 {
        return Ok(mask.clone());
    }
    let mid = sample.midline_x;
    let (mut left, mut right) = (0usize, 0usize);
    for ((_, c), v) in mask.grid.indexed_iter() {
        if *v == 1 {
            if c < mid {
                left += 1;
            } else {
                right += 1;
            }
        }
    }
    let side = if left > right { Side::Left } else { Side::Right };
    let face = sample.parts.face_mask();
    let dist = chebyshev_distance(&mask.grid);
    let grid = Array2::from_shape_fn(mask.grid.dim(), |(r, c)| {
        if mask.grid[[r, c]] == 1 {
            1
        } else if dist[[r, c]] as usize <= steps
            && face[[r, c]] == 1
            && side.contains_col(c, mid)
        {
            1
        } else {
            0
        }
    });
    Mask::new(grid, format!("{}+grow{steps}", mask.spec_tag))
}

/// All non-background pixels strictly on one side of the midline.
pub fn half_face_mask(sample: &Sample, side: Side) -> Result<Mask> {
    let mid = sample.midline_x;
    let face = sample.parts.face_mask();
    let grid = Array2::from_shape_fn(face.dim(), |(r, c)| {
        u8::from(face[[r, c]] == 1 && side.contains_col(c, mid))
    });
    Mask::new(grid, format!("half:{}", side.name()))
}

/// The K x K square at tile (i, j) of the non-overlapping K-tiling.
pub fn block_mask(i: usize, j: usize, k: usize, size: usize) -> Result<Mask> {
    if k == 0 || size % k != 0 {
        return Err(Error::Parameter(format!(
            "block size {k} does not tile image side {size}"
        )));
    }
    let tiles = size / k;
    if i >= tiles || j >= tiles {
        return Err(Error::Parameter(format!(
            "tile ({i}, {j}) outside {tiles}x{tiles} grid"
        )));
    }
    let mut grid = Array2::<u8>::zeros((size, size));
    for r in i * k..(i + 1) * k {
        for c in j * k..(j + 1) * k {
            grid[[r, c]] = 1;
        }
    }
    Mask::new(grid, format!("block:{i},{j}:K{k}"))
}

/// Save a mask as a single-channel PNG (0 or 255).
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let scaled = mask.grid.mapv(|v| v * 255);
    crate::toyfaces::write_label_png(path, &scaled)
}

/// Read a mask PNG; pixels must be exactly 0 or 255.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let raw = crate::toyfaces::read_label_png(path)?;
    if let Some(bad) = raw.iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::Image(format!(
            "mask pixel value {bad} is neither 0 nor 255 in {}",
            path.display()
        )));
    }
    Mask::new(raw.mapv(|v| u8::from(v == 255)), "file")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyfaces::{generate_face, generate_face_with, mirror_map, FaceOptions};

    #[test]
    fn wide_preset_hits_custom_bounds() {
        let mut spec = MaskSpec::wide();
        spec.fraction = (0.40, 0.50);
        let m = random_mask(&spec, 3, 64).unwrap();
        let f = m.hole_fraction();
        assert!((0.40..=0.50).contains(&f), "fraction {f}");
    }

    #[test]
    fn masks_are_deterministic_per_seed() {
        let spec = MaskSpec::narrow();
        let a = random_mask(&spec, 1, 64).unwrap();
        let b = random_mask(&spec, 1, 64).unwrap();
        assert_eq!(a.grid, b.grid);
        let c = random_mask(&spec, 2, 64).unwrap();
        assert_ne!(a.grid, c.grid);
    }

    #[test]
    fn unreachable_bounds_report_achieved_fraction() {
        let spec = MaskSpec {
            kind: MaskKind::Narrow,
            strokes: (1, 1),
            thickness: (2, 2),
            rects: (0, 0),
            rect_frac: (0.1, 0.2),
            fraction: (0.89, 0.90),
        };
        match random_mask(&spec, 0, 64) {
            Err(Error::MaskGeneration { achieved, lo, .. }) => {
                assert!(achieved < lo);
            }
            other => panic!("expected mask generation error, got {other:?}"),
        }
    }

    #[test]
    fn fraction_bounds_hold_across_seeds() {
        for spec in [MaskSpec::narrow(), MaskSpec::medium(), MaskSpec::wide()] {
            for seed in 0..200u64 {
                let m = random_mask(&spec, seed, 64).unwrap();
                let f = m.hole_fraction();
                assert!(
                    f >= spec.fraction.0 && f <= spec.fraction.1,
                    "{} seed {seed}: fraction {f}",
                    spec.kind.name()
                );
                assert!(m.grid.iter().all(|&v| v <= 1));
                assert!(m.hole_count() > 0);
            }
        }
        // aggressive stays within its envelope
        let spec = MaskSpec::aggressive();
        for seed in 0..200u64 {
            let m = random_mask(&spec, seed, 64).unwrap();
            let f = m.hole_fraction();
            assert!(f >= 0.02 && f <= 0.55, "aggressive seed {seed}: {f}");
        }
    }

    #[test]
    fn organ_mask_right_eye_misses_left_eye() {
        let s = generate_face(7, 64, 0.0).unwrap();
        let right = organ_mask(&s, Part::Eye, Side::Right).unwrap();
        let eye = s.parts.mask(Part::Eye);
        let mid = s.midline_x;
        for ((r, c), v) in eye.indexed_iter() {
            if *v == 1 && c < mid {
                assert_eq!(right.grid[[r, c]], 0, "left eye pixel ({r},{c}) covered");
            }
            if *v == 1 && c >= mid {
                assert_eq!(right.grid[[r, c]], 1, "right eye pixel ({r},{c}) missed");
            }
        }
    }

    #[test]
    fn organ_masks_mirror_each_other_when_symmetric() {
        let s = generate_face(11, 64, 0.0).unwrap();
        for organ in [Part::Eye, Part::Ear] {
            let left = organ_mask(&s, organ, Side::Left).unwrap();
            let right = organ_mask(&s, organ, Side::Right).unwrap();
            assert_eq!(mirror_map(&left.grid), right.grid, "{}", organ.name());
        }
    }

    #[test]
    fn missing_organ_is_an_error() {
        let s = generate_face_with(
            5,
            64,
            0.0,
            &FaceOptions {
                omit: vec![Part::Ear],
            },
        )
        .unwrap();
        match organ_mask(&s, Part::Ear, Side::Right) {
            Err(Error::OrganNotFound { organ, side }) => {
                assert_eq!(organ, "ear");
                assert_eq!(side, "right");
            }
            other => panic!("expected organ-not-found, got {other:?}"),
        }
    }

    #[test]
    fn grow_zero_steps_is_identity() {
        let s = generate_face(3, 64, 0.0).unwrap();
        let m = organ_mask(&s, Part::Eye, Side::Right).unwrap();
        let g = grow_mask(&m, 0, &s).unwrap();
        assert_eq!(g.grid, m.grid);
    }

    #[test]
    fn grow_saturates_to_half_face() {
        let s = generate_face(3, 64, 0.0).unwrap();
        let m = organ_mask(&s, Part::Eye, Side::Right).unwrap();
        let grown = grow_mask(&m, 64, &s).unwrap();
        let half = half_face_mask(&s, Side::Right).unwrap();
        assert_eq!(grown.grid, half.grid);
    }

    #[test]
    fn grow_is_monotone() {
        let s = generate_face(9, 64, 0.0).unwrap();
        let m = organ_mask(&s, Part::Eye, Side::Right).unwrap();
        let mut prev = grow_mask(&m, 1, &s).unwrap();
        for steps in 2..=10 {
            let next = grow_mask(&m, steps, &s).unwrap();
            assert!(prev.is_subset_of(&next), "steps {steps}");
            prev = next;
        }
        // idempotent at saturation
        let a = grow_mask(&m, 64, &s).unwrap();
        let b = grow_mask(&m, 100, &s).unwrap();
        assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn half_face_masks_partition_the_face() {
        let s = generate_face(5, 64, 0.0).unwrap();
        let left = half_face_mask(&s, Side::Left).unwrap();
        let right = half_face_mask(&s, Side::Right).unwrap();
        let face = s.parts.face_mask();
        assert!(!left.overlaps(&right));
        for ((r, c), v) in face.indexed_iter() {
            let covered = left.grid[[r, c]] == 1 || right.grid[[r, c]] == 1;
            assert_eq!(covered, *v == 1, "pixel ({r},{c})");
        }
    }

    #[test]
    fn block_mask_counts_and_bounds() {
        let m = block_mask(0, 0, 16, 64).unwrap();
        assert_eq!(m.hole_count(), 256);
        assert!(matches!(
            block_mask(4, 0, 16, 64),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(block_mask(0, 0, 24, 64), Err(Error::Parameter(_))));
    }

    #[test]
    fn mask_png_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_mask(&MaskSpec::medium(), 4, 64).unwrap();
        let path = dir.path().join("m.png");
        write_mask_png(&path, &m).unwrap();
        let back = read_mask_png(&path).unwrap();
        assert_eq!(back.grid, m.grid);

        let bad = dir.path().join("bad.png");
        crate::toyfaces::write_label_png(&bad, &Array2::from_elem((4, 4), 7u8)).unwrap();
        assert!(matches!(read_mask_png(&bad), Err(Error::Image(_))));
    }
}
