//! Occlusion-influence heatmaps and the symmetry concentration score.
//!
//! For a held-out organ region M and a K x K tile, the influence of the tile
//! is how much additionally masking it changes the reconstruction inside M.
//! The score aggregates max-normalized influence over tiles that overlap the
//! mirror image of M, averaged over K in {16, 32, 64}: 1 means all influence
//! mass sits on the mirror region, 0 means none does.

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::masking::{block_mask, half_face_mask, organ_mask, Mask, Side};
use crate::toyfaces::{Part, Sample};

/// Deterministic (image, mask) -> image map.
pub trait Inpaint: Sync {
    fn inpaint(&self, image: &Array3<f32>, mask: &Mask) -> Result<Array3<f32>>;
    fn label(&self) -> String;
}

/// Fills every hole with one constant; depends on nothing.
pub struct ConstantFill(pub f32);

impl Inpaint for ConstantFill {
    fn inpaint(&self, image: &Array3<f32>, mask: &Mask) -> Result<Array3<f32>> {
        check_dims(image, mask)?;
        let mut out = image.clone();
        for ((r, c), v) in mask.grid.indexed_iter() {
            if *v == 1 {
                for k in 0..3 {
                    out[[r, c, k]] = self.0;
                }
            }
        }
        Ok(out)
    }

    fn label(&self) -> String {
        format!("constant:{}", self.0)
    }
}

pub const MIRROR_FILL_FALLBACK: f32 = 0.5;

/// Copies each hole pixel from its horizontal mirror position when that
/// source is known, else a constant gray. The maximally symmetric inpainter.
pub struct MirrorFill;

impl Inpaint for MirrorFill {
    fn inpaint(&self, image: &Array3<f32>, mask: &Mask) -> Result<Array3<f32>> {
        check_dims(image, mask)?;
        let (_, w, _) = image.dim();
        let mut out = image.clone();
        for ((r, c), v) in mask.grid.indexed_iter() {
            if *v == 1 {
                let src = w - 1 - c;
                for k in 0..3 {
                    out[[r, c, k]] = if mask.grid[[r, src]] == 0 {
                        image[[r, src, k]]
                    } else {
                        MIRROR_FILL_FALLBACK
                    };
                }
            }
        }
        Ok(out)
    }

    fn label(&self) -> String {
        "mirror".to_string()
    }
}

/// Fills holes from the mean of known pixels within a square window,
/// iterated to closure; purely local.
pub struct LocalFill {
    pub radius: usize,
}

impl Default for LocalFill {
    fn default() -> Self {
        LocalFill { radius: 5 }
    }
}

impl Inpaint for LocalFill {
    fn inpaint(&self, image: &Array3<f32>, mask: &Mask) -> Result<Array3<f32>> {
        check_dims(image, mask)?;
        let (h, w, _) = image.dim();
        let r = self.radius as isize;
        let mut out = image.clone();
        let mut known = mask.grid.mapv(|v| v == 0);
        let mut remaining: usize = known.iter().filter(|k| !**k).count();
        while remaining > 0 {
            let snapshot = known.clone();
            let prev = out.clone();
            let mut progressed = false;
            for row in 0..h {
                for col in 0..w {
                    if snapshot[[row, col]] {
                        continue;
                    }
                    let mut sum = [0.0f32; 3];
                    let mut n = 0usize;
                    for dr in -r..=r {
                        for dc in -r..=r {
                            let (nr, nc) = (row as isize + dr, col as isize + dc);
                            if nr < 0 || nr >= h as isize || nc < 0 || nc >= w as isize {
                                continue;
                            }
                            let (nr, nc) = (nr as usize, nc as usize);
                            if snapshot[[nr, nc]] {
                                for k in 0..3 {
                                    sum[k] += prev[[nr, nc, k]];
                                }
                                n += 1;
                            }
                        }
                    }
                    if n > 0 {
                        for k in 0..3 {
                            out[[row, col, k]] = sum[k] / n as f32;
                        }
                        known[[row, col]] = true;
                        remaining -= 1;
                        progressed = true;
                    }
                }
            }
            if !progressed {
                // unreachable holes (e.g. the whole image): constant fill
                for row in 0..h {
                    for col in 0..w {
                        if !known[[row, col]] {
                            for k in 0..3 {
                                out[[row, col, k]] = MIRROR_FILL_FALLBACK;
                            }
                        }
                    }
                }
                break;
            }
        }
        Ok(out)
    }

    fn label(&self) -> String {
        format!("local:{}", self.radius)
    }
}

/// A trained generator used as an inpainter (composited by default).
pub struct ModelInpainter<F: Real> {
    pub generator: Generator<F>,
    pub composite: bool,
}

impl<F: Real> Inpaint for ModelInpainter<F> {
    fn inpaint(&self, image: &Array3<f32>, mask: &Mask) -> Result<Array3<f32>> {
        self.generator.inpaint_image(image, mask, self.composite)
    }

    fn label(&self) -> String {
        "model".to_string()
    }
}

fn check_dims(image: &Array3<f32>, mask: &Mask) -> Result<()> {
    let (h, w, ch) = image.dim();
    if ch != 3 || mask.grid.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "image {:?} vs mask {:?}",
            image.dim(),
            mask.grid.dim()
        )));
    }
    Ok(())
}

/// Per-tile influence grid for one block size, with exclusion flags.
#[derive(Debug, Clone)]
pub struct InfluenceHeatmap {
    pub k: usize,
    /// One value per tile, 0 for excluded tiles.
    pub values: Array2<f64>,
    /// Tiles that overlap the held-out region or miss the face entirely.
    pub excluded: Array2<bool>,
    pub organ_mask: Mask,
    pub face_mask: Array2<u8>,
}

impl InfluenceHeatmap {
    pub fn tiles(&self) -> usize {
        self.values.len()
    }

    pub fn max_eligible(&self) -> f64 {
        let mut mx = 0.0f64;
        for (ix, v) in self.values.indexed_iter() {
            if !self.excluded[ix] && *v > mx {
                mx = *v;
            }
        }
        mx
    }
}

fn tile_overlaps(grid: &Array2<u8>, i: usize, j: usize, k: usize) -> bool {
    for r in i * k..(i + 1) * k {
        for c in j * k..(j + 1) * k {
            if grid[[r, c]] == 1 {
                return true;
            }
        }
    }
    false
}

fn mean_abs_diff_on(mask: &Array2<u8>, a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for ((r, c), v) in mask.indexed_iter() {
        if *v == 1 {
            let mut px = 0.0f64;
            for k in 0..3 {
                px += (a[[r, c, k]] - b[[r, c, k]]).abs() as f64;
            }
            total += px / 3.0;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Influence of one K x K tile on the reconstruction of the held-out region:
/// mean absolute change inside M when the tile is additionally masked.
pub fn influence(
    inpainter: &dyn Inpaint,
    sample: &Sample,
    organ_region: &Mask,
    tile: (usize, usize),
    k: usize,
) -> Result<f64> {
    let block = block_mask(tile.0, tile.1, k, sample.size())?;
    if block.overlaps(organ_region) {
        return Err(Error::Parameter(format!(
            "tile ({}, {}) overlaps the held-out region",
            tile.0, tile.1
        )));
    }
    let base = inpainter.inpaint(&sample.image, organ_region)?;
    let both = organ_region.union(&block)?;
    let probed = inpainter.inpaint(&sample.image, &both)?;
    Ok(mean_abs_diff_on(&organ_region.grid, &base, &probed))
}

/// Influence over every eligible tile of the K-tiling. Tiles overlapping the
/// held-out region or lying entirely outside the face are excluded.
pub fn heatmap(
    inpainter: &dyn Inpaint,
    sample: &Sample,
    organ_region: &Mask,
    k: usize,
) -> Result<InfluenceHeatmap> {
    let size = sample.size();
    if k == 0 || size % k != 0 {
        return Err(Error::Parameter(format!(
            "block size {k} does not tile image side {size}"
        )));
    }
    let tiles = size / k;
    let face = sample.parts.face_mask();
    let base = inpainter.inpaint(&sample.image, organ_region)?;

    let jobs: Vec<(usize, usize)> = (0..tiles)
        .flat_map(|i| (0..tiles).map(move |j| (i, j)))
        .collect();
    let results: Vec<(usize, usize, f64, bool)> = jobs
        .par_iter()
        .map(|&(i, j)| -> Result<(usize, usize, f64, bool)> {
            let excluded = tile_overlaps(&organ_region.grid, i, j, k)
                || !tile_overlaps(&face, i, j, k);
            if excluded {
                return Ok((i, j, 0.0, true));
            }
            let block = block_mask(i, j, k, size)?;
            let both = organ_region.union(&block)?;
            let probed = inpainter.inpaint(&sample.image, &both)?;
            Ok((i, j, mean_abs_diff_on(&organ_region.grid, &base, &probed), false))
        })
        .collect::<Result<_>>()?;

    let mut values = Array2::<f64>::zeros((tiles, tiles));
    let mut excluded = Array2::<bool>::from_elem((tiles, tiles), false);
    for (i, j, v, e) in results {
        values[[i, j]] = v;
        excluded[[i, j]] = e;
    }
    Ok(InfluenceHeatmap {
        k,
        values,
        excluded,
        organ_mask: organ_region.clone(),
        face_mask: face,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScsTarget {
    Eye,
    HalfFace,
}

impl ScsTarget {
    pub fn name(self) -> &'static str {
        match self {
            ScsTarget::Eye => "eye",
            ScsTarget::HalfFace => "half",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "eye" => ScsTarget::Eye,
            "half" | "half_face" | "half-face" => ScsTarget::HalfFace,
            other => return Err(Error::Parameter(format!("unknown target `{other}`"))),
        })
    }
}

pub const SCS_BLOCK_SIZES: [usize; 3] = [16, 32, 64];

/// Score of one block size: mean of max-normalized influence over eligible
/// tiles that overlap the mirror region (0 when the heatmap is all zero).
pub fn scs_k_from_heatmap(hm: &InfluenceHeatmap, mirror_region: &Array2<u8>) -> f64 {
    let max = hm.max_eligible();
    if max <= 0.0 {
        return 0.0;
    }
    let tiles = hm.values.dim().0;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for i in 0..tiles {
        for j in 0..tiles {
            if hm.excluded[[i, j]] {
                continue;
            }
            if tile_overlaps(mirror_region, i, j, hm.k) {
                sum += hm.values[[i, j]] / max;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Held-out region M and its mirror region R for one target.
pub fn scs_regions(sample: &Sample, target: ScsTarget) -> Result<(Mask, Array2<u8>)> {
    match target {
        ScsTarget::Eye => {
            // the organ must exist on both sides
            organ_mask(sample, Part::Eye, Side::Left)?;
            let m = organ_mask(sample, Part::Eye, Side::Right)?;
            let region = crate::toyfaces::mirror_map(&m.grid);
            Ok((m, region))
        }
        ScsTarget::HalfFace => {
            let m = half_face_mask(sample, Side::Right)?;
            if m.hole_count() == 0 {
                return Err(Error::OrganNotFound {
                    organ: "half_face".into(),
                    side: "right".into(),
                });
            }
            // mirror images of the triple-weighted organs (eye, lip, ear)
            // inside the masked half
            let mid = sample.midline_x;
            let size = sample.size();
            let mut organs = Array2::<u8>::zeros((size, size));
            for part in [Part::Eye, Part::Lip, Part::Ear] {
                let mask = sample.parts.mask(part);
                for ((r, c), v) in mask.indexed_iter() {
                    if *v == 1 && c >= mid {
                        organs[[r, c]] = 1;
                    }
                }
            }
            if organs.iter().all(|&v| v == 0) {
                return Err(Error::OrganNotFound {
                    organ: "eye/lip/ear".into(),
                    side: "right".into(),
                });
            }
            let region = crate::toyfaces::mirror_map(&organs);
            Ok((m, region))
        }
    }
}

#[derive(Debug)]
pub struct ScsBreakdown {
    pub value: f64,
    pub mirror_region: Array2<u8>,
    pub per_k: Vec<(usize, f64, InfluenceHeatmap)>,
}

pub fn scs_detailed(
    inpainter: &dyn Inpaint,
    sample: &Sample,
    target: ScsTarget,
) -> Result<ScsBreakdown> {
    let (m, region) = scs_regions(sample, target)?;
    let mut per_k = Vec::new();
    let mut total = 0.0f64;
    for k in SCS_BLOCK_SIZES {
        let hm = heatmap(inpainter, sample, &m, k)?;
        let s = scs_k_from_heatmap(&hm, &region);
        total += s;
        per_k.push((k, s, hm));
    }
    Ok(ScsBreakdown {
        value: (total / SCS_BLOCK_SIZES.len() as f64).clamp(0.0, 1.0),
        mirror_region: region,
        per_k,
    })
}

/// Symmetry concentration score in [0,1].
pub fn scs(inpainter: &dyn Inpaint, sample: &Sample, target: ScsTarget) -> Result<f64> {
    Ok(scs_detailed(inpainter, sample, target)?.value)
}

/// Grayscale rendering upsampled to input resolution, optionally with the
/// face boundary drawn in.
pub fn render_heatmap(hm: &InfluenceHeatmap, with_border: bool) -> image::RgbImage {
    let tiles = hm.values.dim().0;
    let size = tiles * hm.k;
    let max = hm.max_eligible();
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for r in 0..size {
        for c in 0..size {
            let (i, j) = (r / hm.k, c / hm.k);
            let v = if hm.excluded[[i, j]] || max <= 0.0 {
                0.0
            } else {
                hm.values[[i, j]] / max
            };
            let g = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(c as u32, r as u32, image::Rgb([g, g, g]));
        }
    }
    if with_border {
        let face = &hm.face_mask;
        for r in 0..size {
            for c in 0..size {
                if face[[r, c]] == 1 {
                    let mut boundary = false;
                    for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr < 0 || nr >= size as isize || nc < 0 || nc >= size as isize {
                            boundary = true;
                        } else if face[[nr as usize, nc as usize]] == 0 {
                            boundary = true;
                        }
                    }
                    if boundary {
                        img.put_pixel(c as u32, r as u32, image::Rgb([255, 255, 255]));
                    }
                }
            }
        }
    }
    img
}

/// CSV rows `i,j,K,value,excluded`, one per tile; f64 values round-trip.
pub fn heatmap_csv(hm: &InfluenceHeatmap) -> String {
    let mut s = String::from("i,j,K,value,excluded\n");
    let tiles = hm.values.dim().0;
    for i in 0..tiles {
        for j in 0..tiles {
            s.push_str(&format!(
                "{i},{j},{},{},{}\n",
                hm.k,
                hm.values[[i, j]],
                u8::from(hm.excluded[[i, j]])
            ));
        }
    }
    s
}

pub fn parse_heatmap_csv(text: &str) -> Result<Vec<(usize, usize, usize, f64, bool)>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Integrity(format!(
                "heatmap csv line {}: expected 5 columns",
                ln + 1
            )));
        }
        let parse_err = |what: &str| Error::Integrity(format!("heatmap csv line {}: {what}", ln + 1));
        rows.push((
            cols[0].parse().map_err(|_| parse_err("i"))?,
            cols[1].parse().map_err(|_| parse_err("j"))?,
            cols[2].parse().map_err(|_| parse_err("K"))?,
            cols[3].parse().map_err(|_| parse_err("value"))?,
            cols[4] == "1",
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyfaces::generate_face;

    #[test]
    fn constant_fill_has_zero_influence_and_zero_scs() {
        let sample = generate_face(3, 64, 0.0).unwrap();
        let inp = ConstantFill(0.3);
        let m = organ_mask(&sample, Part::Eye, Side::Right).unwrap();
        let hm = heatmap(&inp, &sample, &m, 16).unwrap();
        assert!(hm.values.iter().all(|&v| v == 0.0));
        let s = scs(&inp, &sample, ScsTarget::Eye).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn mirror_fill_influence_support_is_exactly_the_mirror_region() {
        let sample = generate_face(7, 64, 0.0).unwrap();
        let inp = MirrorFill;
        let m = organ_mask(&sample, Part::Eye, Side::Right).unwrap();
        let mirror = crate::toyfaces::mirror_map(&m.grid);
        for k in [16usize, 32] {
            let hm = heatmap(&inp, &sample, &m, k).unwrap();
            let tiles = 64 / k;
            let mut any_nonzero = false;
            for i in 0..tiles {
                for j in 0..tiles {
                    if hm.excluded[[i, j]] {
                        continue;
                    }
                    let overlaps = tile_overlaps(&mirror, i, j, k);
                    if hm.values[[i, j]] > 0.0 {
                        any_nonzero = true;
                        assert!(overlaps, "K={k}: influence outside mirror at ({i},{j})");
                    }
                    if !overlaps {
                        assert_eq!(hm.values[[i, j]], 0.0, "K={k}: ({i},{j})");
                    }
                }
            }
            assert!(any_nonzero, "K={k}: mirror fill must have influence");
        }
    }

    #[test]
    fn heatmap_values_match_single_influence_calls() {
        let sample = generate_face(5, 64, 0.0).unwrap();
        let inp = MirrorFill;
        let m = organ_mask(&sample, Part::Eye, Side::Right).unwrap();
        let hm = heatmap(&inp, &sample, &m, 16).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if hm.excluded[[i, j]] {
                    continue;
                }
                let v = influence(&inp, &sample, &m, (i, j), 16).unwrap();
                assert_eq!(v, hm.values[[i, j]], "tile ({i},{j})");
            }
        }
        // overlapping tile is a parameter error
        let mut bad = None;
        'outer: for i in 0..4 {
            for j in 0..4 {
                if tile_overlaps(&m.grid, i, j, 16) {
                    bad = Some((i, j));
                    break 'outer;
                }
            }
        }
        let bad = bad.expect("organ occupies some tile");
        assert!(matches!(
            influence(&inp, &sample, &m, bad, 16),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn influence_ignores_content_outside_relevant_sets() {
        // for the mirror oracle, editing a pixel outside M, the tile and the
        // mirror sources leaves the influence unchanged
        let sample = generate_face(9, 64, 0.0).unwrap();
        let inp = MirrorFill;
        let m = organ_mask(&sample, Part::Eye, Side::Right).unwrap();
        let mirror = crate::toyfaces::mirror_map(&m.grid);
        // find an eligible tile overlapping the mirror region
        let mut target = None;
        for i in 0..4 {
            for j in 0..4 {
                if !tile_overlaps(&m.grid, i, j, 16) && tile_overlaps(&mirror, i, j, 16) {
                    target = Some((i, j));
                }
            }
        }
        let tile = target.expect("mirror tile");
        let v0 = influence(&inp, &sample, &m, tile, 16).unwrap();
        let mut edited = sample.clone();
        edited.image[[0, 0, 0]] = 1.0 - edited.image[[0, 0, 0]];
        let v1 = influence(&inp, &edited, &m, tile, 16).unwrap();
        assert_eq!(v0, v1);
        assert!(v0 > 0.0);
    }

    #[test]
    fn scs_prefers_mirror_over_local_on_symmetric_faces() {
        let sample = generate_face(21, 128, 0.0).unwrap();
        let mirror = scs_detailed(&MirrorFill, &sample, ScsTarget::Eye).unwrap();
        let local = scs_detailed(&LocalFill::default(), &sample, ScsTarget::Eye).unwrap();
        assert!(
            mirror.value > local.value,
            "mirror {} vs local {}",
            mirror.value,
            local.value
        );
        assert!((0.0..=1.0).contains(&mirror.value));
        assert!((0.0..=1.0).contains(&local.value));
    }

    #[test]
    fn scs_k_is_invariant_to_heatmap_scaling() {
        let sample = generate_face(11, 64, 0.0).unwrap();
        let m = organ_mask(&sample, Part::Eye, Side::Right).unwrap();
        let region = crate::toyfaces::mirror_map(&m.grid);
        let hm = heatmap(&MirrorFill, &sample, &m, 16).unwrap();
        let base = scs_k_from_heatmap(&hm, &region);
        let mut scaled = hm.clone();
        scaled.values.mapv_inplace(|v| v * 7.25);
        let got = scs_k_from_heatmap(&scaled, &region);
        assert!((got - base).abs() < 1e-12);
    }

    #[test]
    fn render_and_csv_contracts() {
        let sample = generate_face(13, 64, 0.0).unwrap();
        let m = organ_mask(&sample, Part::Eye, Side::Right).unwrap();
        let zero = heatmap(&ConstantFill(0.1), &sample, &m, 16).unwrap();
        let img = render_heatmap(&zero, false);
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]), "uniform dark");

        let hm = heatmap(&MirrorFill, &sample, &m, 16).unwrap();
        let csv = heatmap_csv(&hm);
        let rows = parse_heatmap_csv(&csv).unwrap();
        assert_eq!(rows.len(), 16);
        for (i, j, k, v, ex) in rows {
            assert_eq!(k, 16);
            assert!((v - hm.values[[i, j]]).abs() <= 1e-6);
            assert_eq!(ex, hm.excluded[[i, j]]);
        }
    }

    #[test]
    fn missing_organ_reports_organ_not_found() {
        let sample = crate::toyfaces::generate_face_with(
            2,
            64,
            0.0,
            &crate::toyfaces::FaceOptions {
                omit: vec![Part::Eye],
            },
        )
        .unwrap();
        assert!(matches!(
            scs(&MirrorFill, &sample, ScsTarget::Eye),
            Err(Error::OrganNotFound { .. })
        ));
    }

    #[test]
    fn local_fill_closure_fills_everything() {
        let sample = generate_face(4, 64, 0.0).unwrap();
        let m = half_face_mask(&sample, Side::Right).unwrap();
        let out = LocalFill::default().inpaint(&sample.image, &m).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        // known pixels untouched
        for ((r, c), v) in m.grid.indexed_iter() {
            if *v == 0 {
                for k in 0..3 {
                    assert_eq!(out[[r, c, k]], sample.image[[r, c, k]]);
                }
            }
        }
    }
}
