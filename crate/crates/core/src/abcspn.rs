//! Autoregressive block-wise models of images: a class prior times a
//! raster-ordered product of per-block circuits, block `i` conditioned on
//! the pixels of blocks `0..i` followed by the class one-hot vector.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng as _, RngCore};

use crate::circuit::{Circuit, CircuitError, Evidence, Slot};
use crate::citest::{PairExecutor, SerialPairs};
use crate::data::{ColumnType, Dataset};
use crate::learn::{self, LearnError, LearnParams, LearnStats};
use crate::leaves::FitControl;
use crate::math::log;
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AbcspnError {
    #[error("invalid block grid: {0}")]
    Grid(String),
    #[error("{0}")]
    Data(String),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("class weights must be a point of the simplex: {0}")]
    Mixture(String),
    #[error("block {block}: {source}")]
    Learn { block: usize, source: LearnError },
    #[error("block {block}: {source}")]
    Circuit { block: usize, source: CircuitError },
    #[error("model is inconsistent: {0}")]
    Model(String),
}

/// Tiling of an `height × width` image into `grid_rows × grid_cols` equal
/// blocks. Blocks and the pixels inside each block are in raster order;
/// pixels are flat row-major indices into the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockGrid {
    height: usize,
    width: usize,
    grid_rows: usize,
    grid_cols: usize,
    blocks: Vec<Vec<usize>>,
}

impl BlockGrid {
    pub fn new(height: usize, width: usize, grid_rows: usize, grid_cols: usize) -> Result<Self, AbcspnError> {
        if height == 0 || width == 0 || grid_rows == 0 || grid_cols == 0 {
            return Err(AbcspnError::Grid("dimensions must be positive".into()));
        }
        if !height.is_multiple_of(grid_rows) || !width.is_multiple_of(grid_cols) {
            return Err(AbcspnError::Grid(format!(
                "{grid_rows}x{grid_cols} blocks do not tile a {height}x{width} image"
            )));
        }
        let (bh, bw) = (height / grid_rows, width / grid_cols);
        let mut blocks = Vec::with_capacity(grid_rows * grid_cols);
        for gr in 0..grid_rows {
            for gc in 0..grid_cols {
                let mut px = Vec::with_capacity(bh * bw);
                for r in gr * bh..(gr + 1) * bh {
                    for c in gc * bw..(gc + 1) * bw {
                        px.push(r * width + c);
                    }
                }
                blocks.push(px);
            }
        }
        Ok(BlockGrid { height, width, grid_rows, grid_cols, blocks })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid_rows(&self) -> usize {
        self.grid_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.grid_cols
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, i: usize) -> &[usize] {
        &self.blocks[i]
    }

    /// Number of pixels in blocks `0..i`.
    pub fn preceding(&self, i: usize) -> usize {
        self.blocks[..i].iter().map(Vec::len).sum()
    }

    /// Reorders the stored pixel list of block `i`. Test hook for checking
    /// that assembly only reads blocks in raster order.
    pub fn permute_block(&mut self, i: usize, perm: &[usize]) {
        let old = self.blocks[i].clone();
        self.blocks[i] = perm.iter().map(|&p| old[p]).collect();
    }
}

/// Pixel leaf distribution used when learning blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelMode {
    /// Gaussian leaves on intensities in `[0, 1]`.
    Gaussian,
    /// Bernoulli leaves on binarized pixels.
    Bernoulli,
}

impl PixelMode {
    fn column_type(self) -> ColumnType {
        match self {
            PixelMode::Gaussian => ColumnType::Continuous,
            PixelMode::Bernoulli => ColumnType::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbcspnModel {
    grid: BlockGrid,
    class_prior: Vec<f64>,
    blocks: Vec<Circuit>,
}

impl AbcspnModel {
    pub fn new(grid: BlockGrid, class_prior: Vec<f64>, blocks: Vec<Circuit>) -> Result<Self, AbcspnError> {
        let classes = class_prior.len();
        if classes == 0 {
            return Err(AbcspnError::Model("no classes".into()));
        }
        let total: f64 = class_prior.iter().sum();
        if class_prior.iter().any(|&p| !(p > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(AbcspnError::Model(format!("class prior {class_prior:?} is not a positive distribution")));
        }
        if blocks.len() != grid.num_blocks() {
            return Err(AbcspnError::Model(format!("{} block circuits for {} blocks", blocks.len(), grid.num_blocks())));
        }
        for (i, c) in blocks.iter().enumerate() {
            let want_x = grid.preceding(i) + classes;
            if c.num_y() != grid.block(i).len() || c.num_x() != want_x {
                return Err(AbcspnError::Model(format!(
                    "block {i} circuit has {} targets and {} features, expected {} and {want_x}",
                    c.num_y(),
                    c.num_x(),
                    grid.block(i).len()
                )));
            }
        }
        Ok(AbcspnModel { grid, class_prior, blocks })
    }

    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn num_classes(&self) -> usize {
        self.class_prior.len()
    }

    pub fn class_prior(&self) -> &[f64] {
        &self.class_prior
    }

    pub fn blocks(&self) -> &[Circuit] {
        &self.blocks
    }

    pub fn into_parts(self) -> (BlockGrid, Vec<f64>, Vec<Circuit>) {
        (self.grid, self.class_prior, self.blocks)
    }

    fn check_image(&self, image: usize) -> Result<(), AbcspnError> {
        if image != self.grid.num_pixels() {
            return Err(AbcspnError::Data(format!("image has {image} pixels, model expects {}", self.grid.num_pixels())));
        }
        Ok(())
    }

    fn check_class(&self, class: usize) -> Result<(), AbcspnError> {
        if class >= self.num_classes() {
            return Err(AbcspnError::ClassOutOfRange { class, classes: self.num_classes() });
        }
        Ok(())
    }

    /// `log p(block_i | blocks before i, class)` for every block.
    pub fn block_log_densities(&self, image: &[f64], class: usize) -> Result<Vec<f64>, AbcspnError> {
        self.check_image(image.len())?;
        self.check_class(class)?;
        let onehot = one_hot(class, self.num_classes());
        (0..self.blocks.len())
            .map(|i| {
                let y: Vec<f64> = self.grid.block(i).iter().map(|&p| image[p]).collect();
                let x = conditioning(&self.grid, i, image, &onehot);
                self.blocks[i].log_density_of(&y, &x).map_err(|source| AbcspnError::Circuit { block: i, source })
            })
            .collect()
    }

    /// `log p(class) + Σ_i log p(block_i | blocks before i, class)`.
    pub fn log_likelihood(&self, image: &[f64], class: usize) -> Result<f64, AbcspnError> {
        let terms = self.block_log_densities(image, class)?;
        Ok(log(self.class_prior[class]) + terms.iter().sum::<f64>())
    }

    /// Log-likelihood with some pixels marginalized. Every pixel that a
    /// block with observed pixels conditions on must itself be observed.
    pub fn log_marginal(&self, image: &[Slot], class: usize) -> Result<f64, AbcspnError> {
        self.check_image(image.len())?;
        self.check_class(class)?;
        let onehot = one_hot(class, self.num_classes());
        let mut total = log(self.class_prior[class]);
        let mut prefix_observed = true;
        let mut prefix = Vec::new();
        for i in 0..self.blocks.len() {
            let y: Vec<Slot> = self.grid.block(i).iter().map(|&p| image[p]).collect();
            let any_observed = y.iter().any(|s| matches!(s, Slot::Observed(_)));
            if any_observed {
                if !prefix_observed {
                    return Err(AbcspnError::Data(format!(
                        "block {i} has observed pixels but conditions on marginalized ones"
                    )));
                }
                let mut x = prefix.clone();
                x.extend_from_slice(&onehot);
                total += self.blocks[i]
                    .log_marginal(&Evidence { x, y: y.clone() })
                    .map_err(|source| AbcspnError::Circuit { block: i, source })?;
            }
            for s in &y {
                match s {
                    Slot::Observed(v) => prefix.push(*v),
                    Slot::Marginalized => {
                        prefix_observed = false;
                        prefix.push(0.0);
                    }
                }
            }
        }
        Ok(total)
    }

    /// Ancestral sample conditioned on a class or a mixture of classes;
    /// `class_weights` is used directly as the conditioning encoding.
    pub fn sample<R: RngCore + ?Sized>(&self, class_weights: &[f64], rng: &mut R) -> Result<Vec<f64>, AbcspnError> {
        check_simplex(class_weights, self.num_classes())?;
        let mut image = vec![0.0; self.grid.num_pixels()];
        for i in 0..self.blocks.len() {
            let x = conditioning(&self.grid, i, &image, class_weights);
            let y = self.blocks[i].sample(&x, rng).map_err(|source| AbcspnError::Circuit { block: i, source })?;
            for (&p, v) in self.grid.block(i).iter().zip(y) {
                image[p] = v.clamp(0.0, 1.0);
            }
        }
        Ok(image)
    }

    pub fn sample_class<R: RngCore + ?Sized>(&self, class: usize, rng: &mut R) -> Result<Vec<f64>, AbcspnError> {
        self.check_class(class)?;
        self.sample(&one_hot(class, self.num_classes()), rng)
    }

    /// Draws the class from the prior, then the image.
    pub fn sample_joint<R: RngCore + ?Sized>(&self, rng: &mut R) -> Result<(usize, Vec<f64>), AbcspnError> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut class = self.num_classes() - 1;
        for (c, p) in self.class_prior.iter().enumerate() {
            acc += p;
            if u < acc {
                class = c;
                break;
            }
        }
        Ok((class, self.sample_class(class, rng)?))
    }
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

fn check_simplex(w: &[f64], classes: usize) -> Result<(), AbcspnError> {
    if w.len() != classes {
        return Err(AbcspnError::Mixture(format!("{} weights for {classes} classes", w.len())));
    }
    let total: f64 = w.iter().sum();
    if w.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(AbcspnError::Mixture(format!("{w:?}")));
    }
    Ok(())
}

/// Pixels of blocks `0..i` in raster order, then the class encoding.
pub fn conditioning(grid: &BlockGrid, i: usize, image: &[f64], class_encoding: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(grid.preceding(i) + class_encoding.len());
    for b in 0..i {
        x.extend(grid.block(b).iter().map(|&p| image[p]));
    }
    x.extend_from_slice(class_encoding);
    x
}

/// A labelled image collection; `pixels` is `n × height × width` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.height * self.width;
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn validate(&self, mode: PixelMode) -> Result<(), AbcspnError> {
        let d = self.height * self.width;
        if d == 0 || self.pixels.len() != self.labels.len() * d {
            return Err(AbcspnError::Data(format!(
                "{} pixel values for {} images of {}x{}",
                self.pixels.len(),
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        if let Some(&c) = self.labels.iter().find(|&&c| c >= self.num_classes) {
            return Err(AbcspnError::ClassOutOfRange { class: c, classes: self.num_classes });
        }
        let ok = |v: f64| match mode {
            PixelMode::Gaussian => (0.0..=1.0).contains(&v),
            PixelMode::Bernoulli => v == 0.0 || v == 1.0,
        };
        if let Some(pos) = self.pixels.iter().position(|&v| !ok(v)) {
            return Err(AbcspnError::Data(format!(
                "image {} pixel {} has value {} outside the {mode:?} range",
                pos / d,
                pos % d,
                self.pixels[pos]
            )));
        }
        Ok(())
    }

    /// Subset of images, in the given order.
    pub fn select(&self, rows: &[usize]) -> ImageSet {
        let d = self.height * self.width;
        ImageSet {
            height: self.height,
            width: self.width,
            pixels: rows.iter().flat_map(|&r| self.pixels[r * d..(r + 1) * d].iter().copied()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Pixels thresholded at 0.5.
    pub fn binarized(&self) -> ImageSet {
        ImageSet { pixels: self.pixels.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(), ..self.clone() }
    }
}

/// Class prior from label counts with add-one smoothing.
pub fn smoothed_prior(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![1.0; classes];
    for &c in labels {
        counts[c] += 1.0;
    }
    let total = (labels.len() + classes) as f64;
    counts.iter().map(|c| c / total).collect()
}

/// Training data of block `i`: its pixels as targets, the preceding
/// pixels and the class one-hot as features.
pub fn block_dataset(images: &ImageSet, grid: &BlockGrid, mode: PixelMode, i: usize) -> Result<Dataset, AbcspnError> {
    let block = grid.block(i);
    let mut y = Vec::with_capacity(images.len() * block.len());
    let mut x = Vec::with_capacity(images.len() * (grid.preceding(i) + images.num_classes));
    for r in 0..images.len() {
        let img = images.image(r);
        y.extend(block.iter().map(|&p| img[p]));
        x.extend(conditioning(grid, i, img, &one_hot(images.labels[r], images.num_classes)));
    }
    let ty = mode.column_type();
    let mut x_types = vec![ty; grid.preceding(i)];
    x_types.extend(core::iter::repeat_n(ColumnType::Binary, images.num_classes));
    Dataset::from_blocks(&vec![ty; block.len()], y, &x_types, x).map_err(|e| AbcspnError::Data(format!("block {i}: {e}")))
}

fn check_training(images: &ImageSet, grid: &BlockGrid, mode: PixelMode) -> Result<(), AbcspnError> {
    images.validate(mode)?;
    if images.is_empty() {
        return Err(AbcspnError::Data("no training images".into()));
    }
    if images.height != grid.height() || images.width != grid.width() {
        return Err(AbcspnError::Grid(format!(
            "grid is for {}x{} images, data is {}x{}",
            grid.height(),
            grid.width(),
            images.height,
            images.width
        )));
    }
    Ok(())
}

/// Learns the circuit of block `i`. Each block gets its own seed stream,
/// so blocks can be learned in any order or in parallel.
pub fn train_block(
    images: &ImageSet,
    grid: &BlockGrid,
    mode: PixelMode,
    params: &LearnParams,
    i: usize,
    exec: &dyn PairExecutor,
) -> Result<learn::Learned, AbcspnError> {
    check_training(images, grid, mode)?;
    let data = block_dataset(images, grid, mode, i)?;
    let params = LearnParams { seed: rng::derive_seed(params.seed, &[i as u64]), ..params.clone() };
    learn::learn_cspn_with(&data, &params, exec).map_err(|source| AbcspnError::Learn { block: i, source })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedAbcspn {
    pub model: AbcspnModel,
    pub block_stats: Vec<LearnStats>,
}

/// Learns every block in raster order.
pub fn abcspn_train(images: &ImageSet, grid: &BlockGrid, mode: PixelMode, params: &LearnParams) -> Result<TrainedAbcspn, AbcspnError> {
    abcspn_train_with(images, grid, mode, params, &SerialPairs)
}

/// As [`abcspn_train`] with a caller-chosen pair executor. Callers that
/// learn blocks in parallel use [`train_block`] and [`assemble`] instead.
pub fn abcspn_train_with(
    images: &ImageSet,
    grid: &BlockGrid,
    mode: PixelMode,
    params: &LearnParams,
    exec: &dyn PairExecutor,
) -> Result<TrainedAbcspn, AbcspnError> {
    check_training(images, grid, mode)?;
    params.validate().map_err(|source| AbcspnError::Learn { block: 0, source })?;
    let learned = (0..grid.num_blocks())
        .map(|i| train_block(images, grid, mode, params, i, exec))
        .collect::<Result<Vec<_>, _>>()?;
    assemble(images, grid, learned)
}

/// Assembles independently learned blocks into a model.
pub fn assemble(images: &ImageSet, grid: &BlockGrid, learned: Vec<learn::Learned>) -> Result<TrainedAbcspn, AbcspnError> {
    let (blocks, block_stats): (Vec<_>, Vec<_>) = learned.into_iter().map(|l| (l.circuit, l.stats)).unzip();
    let prior = smoothed_prior(&images.labels, images.num_classes);
    Ok(TrainedAbcspn { model: AbcspnModel::new(grid.clone(), prior, blocks)?, block_stats })
}

/// Baseline: class prior times fully factorized pixels, each pixel a GLM on
/// the class one-hot only.
pub fn class_factorized_baseline(images: &ImageSet, mode: PixelMode, ctrl: &FitControl) -> Result<AbcspnModel, AbcspnError> {
    let grid = BlockGrid::new(images.height, images.width, 1, 1)?;
    check_training(images, &grid, mode)?;
    let data = block_dataset(images, &grid, mode, 0)?;
    let circuit = learn::factorized_baseline(&data, ctrl).map_err(|source| AbcspnError::Learn { block: 0, source })?;
    AbcspnModel::new(grid, smoothed_prior(&images.labels, images.num_classes), vec![circuit])
}

/// Mean log-likelihood over a labelled image set.
pub fn mean_log_likelihood(model: &AbcspnModel, images: &ImageSet) -> Result<f64, AbcspnError> {
    let mut s = 0.0;
    for r in 0..images.len() {
        s += model.log_likelihood(images.image(r), images.labels[r])?;
    }
    Ok(s / images.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random_circuit::binary_assignments;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn noisy_images(n: usize, h: usize, w: usize, levels: &[f64], sd: f64, seed: u64) -> ImageSet {
        let mut r = rng::seeded(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % levels.len()).collect();
        let pixels = labels
            .iter()
            .flat_map(|&c| (0..h * w).map(|_| (levels[c] + noise.sample(&mut r)).clamp(0.0, 1.0)).collect::<Vec<_>>())
            .collect();
        ImageSet { height: h, width: w, pixels, labels, num_classes: levels.len() }
    }

    fn binary_images(n: usize, h: usize, w: usize, seed: u64) -> ImageSet {
        let mut r = rng::seeded(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let pixels = labels
            .iter()
            .flat_map(|&c| {
                let p = if c == 0 { 0.2 } else { 0.7 };
                (0..h * w).map(|_| if r.random::<f64>() < p { 1.0 } else { 0.0 }).collect::<Vec<_>>()
            })
            .collect();
        ImageSet { height: h, width: w, pixels, labels, num_classes: 2 }
    }

    fn quick() -> LearnParams {
        LearnParams { min_instances: 60, ..LearnParams::default() }
    }

    #[test]
    fn grid_tiles_in_raster_order() {
        let g = BlockGrid::new(4, 4, 2, 2).unwrap();
        assert_eq!(g.num_blocks(), 4);
        assert_eq!(g.block(0), &[0, 1, 4, 5]);
        assert_eq!(g.block(1), &[2, 3, 6, 7]);
        assert_eq!(g.block(2), &[8, 9, 12, 13]);
        assert_eq!(g.preceding(2), 8);
        assert!(BlockGrid::new(5, 4, 2, 2).is_err());
    }

    #[test]
    fn block_conditioning_dimensions() {
        let imgs = noisy_images(80, 4, 4, &[0.2, 0.8], 0.05, 1);
        let g = BlockGrid::new(4, 4, 2, 2).unwrap();
        let t = abcspn_train(&imgs, &g, PixelMode::Gaussian, &quick()).unwrap();
        assert_eq!(t.model.blocks()[0].num_x(), 2);
        assert_eq!(t.model.blocks()[2].num_x(), 8 + 2);
        assert_eq!(t.model.blocks()[3].num_y(), 4);
    }

    #[test]
    fn single_block_grid_is_prior_times_one_circuit() {
        let imgs = noisy_images(80, 2, 3, &[0.3, 0.6], 0.1, 2);
        let g = BlockGrid::new(2, 3, 1, 1).unwrap();
        let m = abcspn_train(&imgs, &g, PixelMode::Gaussian, &quick()).unwrap().model;
        assert_eq!(m.blocks()[0].num_x(), 2);
        let img = imgs.image(5);
        let direct = m.blocks()[0].log_density_of(img, &one_hot(1, 2)).unwrap();
        let ll = m.log_likelihood(img, 1).unwrap();
        assert_eq!(ll, log(m.class_prior()[1]) + direct);
    }

    #[test]
    fn four_block_likelihood_matches_manual_composition() {
        let imgs = noisy_images(120, 4, 4, &[0.2, 0.5, 0.8], 0.1, 3);
        let g = BlockGrid::new(4, 4, 2, 2).unwrap();
        let m = abcspn_train(&imgs, &g, PixelMode::Gaussian, &quick()).unwrap().model;
        let img = imgs.image(7);
        let class = imgs.labels[7];
        let mut manual = log(m.class_prior()[class]);
        let px = |idx: &[usize]| idx.iter().map(|&p| img[p]).collect::<Vec<f64>>();
        let oh = one_hot(class, 3);
        let blocks = [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]];
        for (i, b) in blocks.iter().enumerate() {
            let mut x: Vec<f64> = blocks[..i].iter().flat_map(|pb| px(pb)).collect();
            x.extend_from_slice(&oh);
            manual += m.blocks()[i].log_density_of(&px(b), &x).unwrap();
        }
        assert!((m.log_likelihood(img, class).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn class_out_of_range_is_rejected() {
        let imgs = noisy_images(40, 2, 2, &[0.3, 0.6], 0.1, 2);
        let g = BlockGrid::new(2, 2, 1, 2).unwrap();
        let m = abcspn_train(&imgs, &g, PixelMode::Gaussian, &quick()).unwrap().model;
        assert_eq!(m.log_likelihood(imgs.image(0), 2), Err(AbcspnError::ClassOutOfRange { class: 2, classes: 2 }));
        assert!(m.sample(&[0.7, 0.7], &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn fully_marginalized_classes_sum_to_one() {
        let imgs = noisy_images(60, 2, 2, &[0.3, 0.6, 0.9], 0.1, 4);
        let g = BlockGrid::new(2, 2, 2, 1).unwrap();
        let m = abcspn_train(&imgs, &g, PixelMode::Gaussian, &quick()).unwrap().model;
        let all = vec![Slot::Marginalized; 4];
        let total: f64 = (0..3).map(|c| m.log_marginal(&all, c).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn binary_joint_normalizes_exhaustively() {
        let imgs = binary_images(200, 2, 2, 5);
        for (gr, gc) in [(2, 2), (1, 2), (1, 1)] {
            let g = BlockGrid::new(2, 2, gr, gc).unwrap();
            let m = abcspn_train(&imgs, &g, PixelMode::Bernoulli, &quick()).unwrap().model;
            let mut total = 0.0;
            for img in binary_assignments(4) {
                for c in 0..2 {
                    total += m.log_likelihood(&img, c).unwrap().exp();
                }
            }
            assert!((total - 1.0).abs() < 1e-8, "{gr}x{gc}: {total}");
        }
    }

    #[test]
    fn marginal_rejects_unobserved_conditioning() {
        let imgs = binary_images(100, 2, 2, 6);
        let g = BlockGrid::new(2, 2, 2, 2).unwrap();
        let m = abcspn_train(&imgs, &g, PixelMode::Bernoulli, &quick()).unwrap().model;
        let mut img = vec![Slot::Observed(1.0); 4];
        img[0] = Slot::Marginalized;
        assert!(m.log_marginal(&img, 0).is_err());
        // Marginalizing a trailing block is fine and sums over its values.
        let prefix = [Slot::Observed(1.0), Slot::Observed(0.0), Slot::Observed(1.0), Slot::Marginalized];
        let summed: f64 = [0.0, 1.0]
            .iter()
            .map(|&v| m.log_likelihood(&[1.0, 0.0, 1.0, v], 1).unwrap().exp())
            .sum();
        assert!((m.log_marginal(&prefix, 1).unwrap().exp() - summed).abs() < 1e-12);
    }

    #[test]
    fn permuting_a_future_block_leaves_earlier_terms_unchanged() {
        let imgs = noisy_images(120, 4, 4, &[0.2, 0.8], 0.1, 7);
        let g = BlockGrid::new(4, 4, 2, 2).unwrap();
        let m = abcspn_train(&imgs, &g, PixelMode::Gaussian, &quick()).unwrap().model;
        let before = m.block_log_densities(imgs.image(3), imgs.labels[3]).unwrap();
        let (mut grid, prior, blocks) = m.into_parts();
        grid.permute_block(3, &[3, 1, 0, 2]);
        let permuted = AbcspnModel::new(grid, prior, blocks).unwrap();
        let after = permuted.block_log_densities(imgs.image(3), imgs.labels[3]).unwrap();
        assert_eq!(before[..3], after[..3]);
    }

    #[test]
    fn constant_images_put_mode_at_the_constant() {
        let imgs = ImageSet { height: 4, width: 4, pixels: vec![0.5; 16 * 50], labels: vec![0; 50], num_classes: 1 };
        let g = BlockGrid::new(4, 4, 2, 2).unwrap();
        let m = abcspn_train(&imgs, &g, PixelMode::Gaussian, &quick()).unwrap().model;
        let at = m.block_log_densities(&[0.5; 16], 0).unwrap();
        let off = m.block_log_densities(&[0.0; 16], 0).unwrap();
        assert!(at.iter().zip(&off).all(|(a, o)| a >= o));

        let mut r = rng::seeded(9);
        let mut close = 0;
        for _ in 0..20 {
            let s = m.sample_class(0, &mut r).unwrap();
            close += s.iter().filter(|v| (**v - 0.5).abs() <= 0.1).count();
        }
        assert!(close as f64 >= 0.95 * 320.0, "{close}/320");
    }

    #[test]
    fn sampling_is_reproducible() {
        let imgs = noisy_images(80, 4, 4, &[0.2, 0.8], 0.1, 8);
        let g = BlockGrid::new(4, 4, 2, 2).unwrap();
        let m = abcspn_train(&imgs, &g, PixelMode::Gaussian, &quick()).unwrap().model;
        let a = m.sample(&[0.3, 0.7], &mut rng::seeded(4)).unwrap();
        let b = m.sample(&[0.3, 0.7], &mut rng::seeded(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn class_mixture_samples_interpolate() {
        let mut ok = 0;
        for seed in 0..10 {
            let imgs = noisy_images(200, 4, 4, &[0.15, 0.85], 0.05, 100 + seed);
            let g = BlockGrid::new(4, 4, 2, 2).unwrap();
            let m = abcspn_train(&imgs, &g, PixelMode::Gaussian, &LearnParams { seed, ..quick() }).unwrap().model;
            let s = m.sample(&[0.5, 0.5], &mut rng::seeded(seed)).unwrap();
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            if mean > 0.15 && mean < 0.85 {
                ok += 1;
            }
        }
        assert!(ok >= 9, "{ok}/10");
    }

    #[test]
    fn ci_tests_per_block_are_quadratic_in_block_size() {
        let imgs = noisy_images(200, 4, 4, &[0.2, 0.8], 0.1, 10);
        let g = BlockGrid::new(4, 4, 2, 2).unwrap();
        let t = abcspn_train(&imgs, &g, PixelMode::Gaussian, &quick()).unwrap();
        for stats in &t.block_stats {
            // The first split at the block root tests every pixel pair.
            assert_eq!(stats.tests_per_split[0], 4 * 3 / 2);
        }
    }

    #[test]
    fn prior_is_smoothed() {
        assert_eq!(smoothed_prior(&[0, 0, 1], 3), vec![3.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0]);
    }

    #[test]
    fn structure_beats_factorized_baseline_on_correlated_pixels() {
        // Each image is one of two random binary templates with a few flipped pixels.
        let mut r = rng::seeded(11);
        let templates: Vec<Vec<f64>> = (0..4).map(|_| (0..16).map(|_| if r.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect()).collect();
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..600 {
            let c = i % 2;
            let t = &templates[2 * c + usize::from(r.random::<f64>() < 0.5)];
            pixels.extend(t.iter().map(|&v| if r.random::<f64>() < 0.05 { 1.0 - v } else { v }));
            labels.push(c);
        }
        let all = ImageSet { height: 4, width: 4, pixels, labels, num_classes: 2 };
        let train = all.select(&(0..400).collect::<Vec<_>>());
        let test = all.select(&(400..600).collect::<Vec<_>>());
        let g = BlockGrid::new(4, 4, 2, 2).unwrap();
        let m = abcspn_train(&train, &g, PixelMode::Bernoulli, &LearnParams { min_instances: 100, ..Default::default() }).unwrap().model;
        let base = class_factorized_baseline(&train, PixelMode::Bernoulli, &FitControl::default()).unwrap();
        let ll = mean_log_likelihood(&m, &test).unwrap();
        let bl = mean_log_likelihood(&base, &test).unwrap();
        assert!(ll > bl, "{ll} vs {bl}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn grid_blocks_partition_pixels(gr in 1usize..4, gc in 1usize..4, bh in 1usize..4, bw in 1usize..4) {
            let g = BlockGrid::new(gr * bh, gc * bw, gr, gc).unwrap();
            let mut seen: Vec<usize> = (0..g.num_blocks()).flat_map(|i| g.block(i).to_vec()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..g.num_pixels()).collect::<Vec<_>>());
            for i in 0..g.num_blocks() {
                prop_assert!(g.block(i).windows(2).all(|w| w[0] < w[1]));
                if i > 0 {
                    prop_assert!(g.block(i - 1)[0] < g.block(i)[0]);
                }
            }
        }
    }
}
