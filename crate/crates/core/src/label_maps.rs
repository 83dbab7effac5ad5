//! Semantic masks, instance maps and the geometric operations on them.
//!
//! Labels are 1-based in storage; one-hot plane `l - 1` holds label `l`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::autograd::nearest_src;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Version of the label sidecar record.
pub const LABELS_FORMAT_VERSION: u32 = 1;

/// A dense H×W grid of integer labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("label grid dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} grid needs {} labels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds a grid from rows; all rows must share a length.
    pub fn from_rows<R: AsRef<[u32]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != width) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), width, data)
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn label_set(&self) -> BTreeSet<u32> {
        self.data.iter().copied().collect()
    }

    fn check_range(&self, max: u32) -> Result<()> {
        match self.data.iter().find(|&&l| l == 0 || l > max) {
            Some(&label) => Err(Error::LabelOutOfRange { label, max }),
            None => Ok(()),
        }
    }
}

/// Class-level label map with labels in `1..=num_classes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMask {
    grid: LabelGrid,
    num_classes: u32,
}

impl SemanticMask {
    pub fn new(grid: LabelGrid, num_classes: u32) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("a semantic mask needs at least one class"));
        }
        grid.check_range(num_classes)?;
        Ok(Self { grid, num_classes })
    }

    pub fn grid(&self) -> &LabelGrid {
        &self.grid
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }
}

/// Instance label map with labels in `1..=num_instances`.
///
/// Construction only checks the label range; [`validate_pair`] rejects maps
/// whose labels are not compact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMap {
    grid: LabelGrid,
    num_instances: u32,
}

impl InstanceMap {
    pub fn new(grid: LabelGrid, num_instances: u32) -> Result<Self> {
        grid.check_range(num_instances)?;
        Ok(Self {
            grid,
            num_instances,
        })
    }

    /// Relabels arbitrary positive labels densely, preserving their order.
    pub fn compacted(grid: &LabelGrid) -> Result<Self> {
        grid.check_range(u32::MAX)?;
        let used: Vec<u32> = grid.label_set().into_iter().collect();
        let data = grid
            .data
            .iter()
            .map(|l| used.binary_search(l).map(|i| i as u32 + 1).unwrap_or(0))
            .collect();
        Ok(Self {
            grid: LabelGrid::new(grid.height, grid.width, data)?,
            num_instances: used.len() as u32,
        })
    }

    pub fn grid(&self) -> &LabelGrid {
        &self.grid
    }

    pub fn num_instances(&self) -> u32 {
        self.num_instances
    }
}

/// Aligned semantic mask and instance map with the instance→class table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPair {
    mask: SemanticMask,
    inst: InstanceMap,
    /// `classes[l - 1]` is the semantic class of instance `l`.
    classes: Vec<u32>,
}

impl LabelPair {
    pub fn mask(&self) -> &SemanticMask {
        &self.mask
    }

    pub fn instances(&self) -> &InstanceMap {
        &self.inst
    }

    /// The instance→class table, indexed by `instance - 1`.
    pub fn instance_classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn class_of(&self, instance: u32) -> u32 {
        self.classes[instance as usize - 1]
    }

    pub fn num_classes(&self) -> u32 {
        self.mask.num_classes
    }

    pub fn num_instances(&self) -> u32 {
        self.inst.num_instances
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.grid.dims()
    }

    /// Instances of the given class, ascending.
    pub fn instances_of_class(&self, class: u32) -> Vec<u32> {
        (1..=self.num_instances())
            .filter(|&l| self.class_of(l) == class)
            .collect()
    }
}

/// Pixel-wise boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("region mask size"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize) -> bool) -> Self {
        Self {
            height,
            width,
            data: (0..height * width).map(f).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }
}

/// L×H×W boolean planes, exactly one set per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotMask {
    planes: usize,
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl OneHotMask {
    pub fn num_planes(&self) -> usize {
        self.planes
    }

    pub fn get(&self, plane: usize, y: usize, x: usize) -> bool {
        self.data[(plane * self.height + y) * self.width + x]
    }

    /// Per-pixel index of the set plane, as a 1-based label grid.
    pub fn argmax(&self) -> LabelGrid {
        let hw = self.height * self.width;
        let data = (0..hw)
            .map(|p| {
                (0..self.planes)
                    .find(|&l| self.data[l * hw + p])
                    .map(|l| l as u32 + 1)
                    .unwrap_or(0)
            })
            .collect();
        LabelGrid {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Planes as a real L×H×W tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.planes, self.height, self.width],
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }
}

/// Checks alignment and consistency of a mask/instance pair and derives the
/// instance→class table.
pub fn validate_pair(mask: SemanticMask, inst: InstanceMap) -> Result<LabelPair> {
    if mask.grid.dims() != inst.grid.dims() {
        return Err(Error::DimensionMismatch {
            expected: mask.grid.dims(),
            got: inst.grid.dims(),
        });
    }
    let mut classes = vec![0u32; inst.num_instances as usize];
    for (&c, &l) in mask.grid.data.iter().zip(&inst.grid.data) {
        let slot = &mut classes[l as usize - 1];
        if *slot == 0 {
            *slot = c;
        } else if *slot != c {
            return Err(Error::InconsistentInstance {
                instance: l,
                first: *slot,
                second: c,
            });
        }
    }
    if let Some(i) = classes.iter().position(|&c| c == 0) {
        return Err(Error::EmptyInstanceLabel(i as u32 + 1));
    }
    Ok(LabelPair {
        mask,
        inst,
        classes,
    })
}

/// Treats every used class as one instance. Used classes are compacted into
/// instance labels in ascending class order, so the table records the
/// compaction; when every class is present the instance grid equals the mask
/// and the table is the identity.
pub fn degenerate_instances(mask: &SemanticMask) -> LabelPair {
    let used: Vec<u32> = mask.grid.label_set().into_iter().collect();
    let data = mask
        .grid
        .data
        .iter()
        .map(|c| used.binary_search(c).expect("label from the same grid") as u32 + 1)
        .collect();
    let inst = InstanceMap {
        grid: LabelGrid {
            height: mask.grid.height,
            width: mask.grid.width,
            data,
        },
        num_instances: used.len() as u32,
    };
    LabelPair {
        mask: mask.clone(),
        inst,
        classes: used,
    }
}

pub fn to_one_hot(grid: &LabelGrid, num_labels: u32) -> Result<OneHotMask> {
    grid.check_range(num_labels)?;
    let hw = grid.height * grid.width;
    let mut data = vec![false; num_labels as usize * hw];
    for (p, &l) in grid.data.iter().enumerate() {
        data[(l as usize - 1) * hw + p] = true;
    }
    Ok(OneHotMask {
        planes: num_labels as usize,
        height: grid.height,
        width: grid.width,
        data,
    })
}

/// Nearest-neighbor resize with half-pixel-center mapping:
/// source index = floor((i + 0.5) · H / H').
pub fn resize_nearest(grid: &LabelGrid, height: usize, width: usize) -> Result<LabelGrid> {
    if height == 0 || width == 0 {
        return Err(Error::shape("resize target must be positive"));
    }
    if (height, width) == grid.dims() {
        return Ok(grid.clone());
    }
    let rows: Vec<usize> = (0..height)
        .map(|y| nearest_src(y, grid.height, height))
        .collect();
    let cols: Vec<usize> = (0..width)
        .map(|x| nearest_src(x, grid.width, width))
        .collect();
    let mut data = Vec::with_capacity(height * width);
    for &sy in &rows {
        for &sx in &cols {
            data.push(grid.data[sy * grid.width + sx]);
        }
    }
    LabelGrid::new(height, width, data)
}

/// Pixels occupied by instance `label`.
pub fn instance_region(inst: &InstanceMap, label: u32) -> Result<RegionMask> {
    if label == 0 || label > inst.num_instances {
        return Err(Error::LabelOutOfRange {
            label,
            max: inst.num_instances,
        });
    }
    Ok(label_region(&inst.grid, label))
}

/// Pixels of `grid` equal to `label`, without range checks.
pub fn label_region(grid: &LabelGrid, label: u32) -> RegionMask {
    RegionMask {
        height: grid.height,
        width: grid.width,
        data: grid.data.iter().map(|&l| l == label).collect(),
    }
}

/// H×W map with 1 where any 4-neighbor carries a different instance label.
pub fn boundary_map(inst: &InstanceMap) -> Tensor {
    let g = &inst.grid;
    let (h, w) = g.dims();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = g.get(y, x);
            let differs = (y > 0 && g.get(y - 1, x) != l)
                || (y + 1 < h && g.get(y + 1, x) != l)
                || (x > 0 && g.get(y, x - 1) != l)
                || (x + 1 < w && g.get(y, x + 1) != l);
            if differs {
                out[y * w + x] = 1.0;
            }
        }
    }
    Tensor::from_parts(vec![h, w], out)
}

/// Sidecar record stored next to the mask and instance images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub num_classes: u32,
    pub num_instances: u32,
    pub instance_classes: Vec<u32>,
}

/// File names used for a label pair stored under `stem`.
pub fn label_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}_mask.png")),
        dir.join(format!("{stem}_inst.png")),
        dir.join(format!("{stem}_labels.json")),
    )
}

fn write_grid_png(grid: &LabelGrid, path: &Path) -> Result<()> {
    if grid.max_label() > u16::MAX as u32 {
        return Err(Error::config("labels above 65535 cannot be stored as 16-bit"));
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        grid.width as u32,
        grid.height as u32,
        grid.data.iter().map(|&l| l as u16).collect(),
    )
    .expect("buffer sized from grid");
    img.save(path).map_err(|e| image_err(path, e))
}

pub(crate) fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::FileNotFound(path.to_path_buf())
        }
        // other read failures are mostly truncated streams
        other => Error::corrupt(path, other.to_string()),
    }
}

fn read_grid_png(path: &Path) -> Result<LabelGrid> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::schema(
                path,
                format!("expected 16-bit single-channel labels, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = img.dimensions();
    LabelGrid::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(u32::from).collect(),
    )
}

/// Writes `<stem>_mask.png`, `<stem>_inst.png` (16-bit grayscale) and the
/// `<stem>_labels.json` sidecar.
pub fn save_label_pair(pair: &LabelPair, dir: &Path, stem: &str) -> Result<()> {
    let (mask_p, inst_p, rec_p) = label_paths(dir, stem);
    write_grid_png(&pair.mask.grid, &mask_p)?;
    write_grid_png(&pair.inst.grid, &inst_p)?;
    let (height, width) = pair.dims();
    let rec = LabelRecord {
        format_version: LABELS_FORMAT_VERSION,
        height,
        width,
        num_classes: pair.num_classes(),
        num_instances: pair.num_instances(),
        instance_classes: pair.classes.clone(),
    };
    let text = serde_json::to_string_pretty(&rec).expect("record serializes");
    fs::write(&rec_p, text).map_err(|e| Error::io(&rec_p, e))
}

pub fn load_label_pair(dir: &Path, stem: &str) -> Result<LabelPair> {
    let (mask_p, inst_p, rec_p) = label_paths(dir, stem);
    let text = fs::read_to_string(&rec_p).map_err(|e| Error::io(&rec_p, e))?;
    let rec: LabelRecord =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(&rec_p, e.to_string()))?;
    if rec.format_version != LABELS_FORMAT_VERSION {
        return Err(Error::schema(
            &rec_p,
            format!(
                "format_version {} (expected {LABELS_FORMAT_VERSION})",
                rec.format_version
            ),
        ));
    }
    let mask_grid = read_grid_png(&mask_p)?;
    let inst_grid = read_grid_png(&inst_p)?;
    if mask_grid.dims() != (rec.height, rec.width) {
        return Err(Error::schema(&mask_p, "mask dimensions disagree with record"));
    }
    let mask = SemanticMask::new(mask_grid, rec.num_classes)
        .map_err(|e| Error::schema(&mask_p, e.to_string()))?;
    let inst = InstanceMap::new(inst_grid, rec.num_instances)
        .map_err(|e| Error::schema(&inst_p, e.to_string()))?;
    let pair = validate_pair(mask, inst).map_err(|e| Error::schema(&inst_p, e.to_string()))?;
    if pair.classes != rec.instance_classes {
        return Err(Error::schema(&rec_p, "instance_classes disagree with the maps"));
    }
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: &[&[u32]]) -> LabelGrid {
        LabelGrid::from_rows(rows).unwrap()
    }

    fn pair(mask: &[&[u32]], inst: &[&[u32]], lm: u32) -> Result<LabelPair> {
        let ig = grid(inst);
        let lp = ig.max_label();
        validate_pair(
            SemanticMask::new(grid(mask), lm).unwrap(),
            InstanceMap::new(ig, lp).unwrap(),
        )
    }

    #[test]
    fn identity_pairing() {
        let p = pair(&[&[1, 2]], &[&[1, 2]], 2).unwrap();
        assert_eq!(p.instance_classes(), &[1, 2]);
    }

    #[test]
    fn inconsistent_instance_rejected() {
        let e = pair(&[&[1, 1], &[2, 2]], &[&[1, 1], &[1, 1]], 2).unwrap_err();
        assert!(matches!(e, Error::InconsistentInstance { instance: 1, .. }));
    }

    #[test]
    fn empty_and_mismatched_pairs_rejected() {
        let mask = SemanticMask::new(grid(&[&[1, 1]]), 1).unwrap();
        let inst = InstanceMap::new(grid(&[&[1, 3]]), 3).unwrap();
        assert!(matches!(
            validate_pair(mask.clone(), inst),
            Err(Error::EmptyInstanceLabel(2))
        ));
        let inst = InstanceMap::new(grid(&[&[1], &[1]]), 1).unwrap();
        assert!(matches!(
            validate_pair(mask, inst),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            SemanticMask::new(grid(&[&[0, 1]]), 2),
            Err(Error::LabelOutOfRange { label: 0, .. })
        ));
    }

    #[test]
    fn painted_pair_recovers_recipe() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let k = rng.random_range(1..=6u32);
            let recipe: Vec<u32> = (0..k).map(|_| rng.random_range(1..=4u32)).collect();
            let mut inst = vec![0u32; 256];
            // stripes guarantee every instance keeps pixels
            for (p, v) in inst.iter_mut().enumerate() {
                *v = (p as u32 / 16) % k + 1;
            }
            for _ in 0..30 {
                let p = rng.random_range(0..256);
                inst[p] = rng.random_range(1..=k);
            }
            for l in 1..=k {
                if !inst.contains(&l) {
                    inst[l as usize] = l;
                }
            }
            let mask: Vec<u32> = inst.iter().map(|&l| recipe[l as usize - 1]).collect();
            let p = validate_pair(
                SemanticMask::new(LabelGrid::new(16, 16, mask).unwrap(), 4).unwrap(),
                InstanceMap::new(LabelGrid::new(16, 16, inst).unwrap(), k).unwrap(),
            )
            .unwrap();
            assert_eq!(p.instance_classes(), recipe.as_slice());
        }
    }

    #[test]
    fn degenerate_examples() {
        let m = SemanticMask::new(grid(&[&[1, 2]]), 2).unwrap();
        let p = degenerate_instances(&m);
        assert_eq!(p.instances().grid(), m.grid());
        assert_eq!(p.instance_classes(), &[1, 2]);

        let m = SemanticMask::new(LabelGrid::filled(3, 3, 1).unwrap(), 3).unwrap();
        assert_eq!(degenerate_instances(&m).num_instances(), 1);

        let m = SemanticMask::new(grid(&[&[2, 5], &[5, 2]]), 5).unwrap();
        let p = degenerate_instances(&m);
        assert_eq!(p.num_instances(), 2);
        assert_eq!(p.instance_classes(), &[2, 5]);
        assert_eq!(p.instances().grid(), &grid(&[&[1, 2], &[2, 1]]));
        // compaction is a valid pair
        validate_pair(p.mask().clone(), p.instances().clone()).unwrap();
    }

    #[test]
    fn one_hot_examples() {
        let oh = to_one_hot(&grid(&[&[1, 2]]), 2).unwrap();
        assert!(oh.get(0, 0, 0) && !oh.get(0, 0, 1));
        assert!(!oh.get(1, 0, 0) && oh.get(1, 0, 1));
        assert!(matches!(
            to_one_hot(&grid(&[&[3]]), 2),
            Err(Error::LabelOutOfRange { label: 3, max: 2 })
        ));
    }

    #[test]
    fn resize_examples() {
        let g = grid(&[&[1, 2], &[3, 4]]);
        let up = resize_nearest(&g, 4, 4).unwrap();
        assert_eq!(
            up,
            grid(&[&[1, 1, 2, 2], &[1, 1, 2, 2], &[3, 3, 4, 4], &[3, 3, 4, 4]])
        );
        assert_eq!(resize_nearest(&g, 2, 2).unwrap(), g);
    }

    #[test]
    fn region_and_boundary_examples() {
        let inst = InstanceMap::new(grid(&[&[1, 2]]), 2).unwrap();
        assert_eq!(instance_region(&inst, 1).unwrap().data(), &[true, false]);
        assert!(instance_region(&inst, 3).is_err());
        let whole = InstanceMap::new(LabelGrid::filled(2, 3, 1).unwrap(), 1).unwrap();
        assert!(instance_region(&whole, 1).unwrap().data().iter().all(|&b| b));
        assert!(boundary_map(&whole).data().iter().all(|&v| v == 0.0));
        let split = InstanceMap::new(grid(&[&[1, 1, 2, 2], &[1, 1, 2, 2]]), 2).unwrap();
        assert_eq!(
            boundary_map(&split).data(),
            &[0., 1., 1., 0., 0., 1., 1., 0.]
        );
    }

    /// Brute-force neighbor scan.
    fn boundary_oracle(g: &LabelGrid) -> Vec<f64> {
        let (h, w) = g.dims();
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize {
                        if g.get(ny as usize, nx as usize) != g.get(y as usize, x as usize) {
                            out[y as usize * w + x as usize] = 1.0;
                        }
                    }
                }
            }
        }
        out
    }

    fn arb_grid(max_label: u32) -> impl Strategy<Value = LabelGrid> {
        (1usize..12, 1usize..12).prop_flat_map(move |(h, w)| {
            proptest::collection::vec(1..=max_label, h * w)
                .prop_map(move |d| LabelGrid::new(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn one_hot_is_exact_and_roundtrips(g in arb_grid(5)) {
            let oh = to_one_hot(&g, 5).unwrap();
            let (h, w) = g.dims();
            for y in 0..h {
                for x in 0..w {
                    let s = (0..5).filter(|&l| oh.get(l, y, x)).count();
                    prop_assert_eq!(s, 1);
                }
            }
            prop_assert_eq!(oh.argmax(), g);
        }

        #[test]
        fn resize_never_invents_labels(g in arb_grid(6), th in 1usize..20, tw in 1usize..20) {
            let r = resize_nearest(&g, th, tw).unwrap();
            prop_assert!(r.label_set().is_subset(&g.label_set()));
        }

        #[test]
        fn regions_partition_the_grid(g in arb_grid(4)) {
            let inst = InstanceMap::compacted(&g).unwrap();
            let mut cover = vec![0u32; g.data().len()];
            for l in 1..=inst.num_instances() {
                let r = instance_region(&inst, l).unwrap();
                prop_assert!(r.count() > 0);
                for (c, &b) in cover.iter_mut().zip(r.data()) {
                    *c += b as u32;
                }
            }
            prop_assert!(cover.iter().all(|&c| c == 1));
        }

        #[test]
        fn boundary_matches_neighbor_scan(g in arb_grid(3)) {
            let inst = InstanceMap::compacted(&g).unwrap();
            let got = boundary_map(&inst);
            let want = boundary_oracle(inst.grid());
            prop_assert_eq!(got.data(), want.as_slice());
        }

        #[test]
        fn degenerate_maps_back_to_mask(g in arb_grid(5)) {
            let m = SemanticMask::new(g.clone(), 5).unwrap();
            let p = degenerate_instances(&m);
            for (&c, &l) in g.data().iter().zip(p.instances().grid().data()) {
                prop_assert_eq!(p.class_of(l), c);
            }
            if g.label_set().len() == 5 {
                prop_assert_eq!(p.instances().grid(), &g);
            }
        }
    }

    #[test]
    fn random_resize_keeps_containment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = LabelGrid::new(31, 17, (0..31 * 17).map(|_| rng.random_range(1..=7)).collect())
            .unwrap();
        let r = resize_nearest(&g, 9, 5).unwrap();
        assert!(r.label_set().is_subset(&g.label_set()));
    }

    #[test]
    fn label_pair_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = pair(&[&[1, 3, 3], &[2, 2, 3]], &[&[1, 2, 2], &[3, 3, 4]], 3).unwrap();
        save_label_pair(&p, dir.path(), "s0").unwrap();
        assert_eq!(load_label_pair(dir.path(), "s0").unwrap(), p);
        let (_, _, rec) = label_paths(dir.path(), "s0");
        let text = fs::read_to_string(&rec)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&rec, text).unwrap();
        assert!(matches!(
            load_label_pair(dir.path(), "s0"),
            Err(Error::SchemaMismatch { .. })
        ));
    }
}
