//! Domain values: label maps, frame sequences, flow and occlusion volumes,
//! latent codes and dataset samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-pixel semantic class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: Vec<u8>,
    num_classes: usize,
    fg_classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(
        height: usize,
        width: usize,
        classes: Vec<u8>,
        num_classes: usize,
        fg_classes: &[u8],
    ) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                classes.len()
            )));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::InvalidInput(format!(
                "num_classes {num_classes} outside 1..=256"
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "class id {bad} >= num_classes {num_classes}"
            )));
        }
        if let Some(&bad) = fg_classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "foreground class {bad} >= num_classes {num_classes}"
            )));
        }
        let mut fg = fg_classes.to_vec();
        fg.sort_unstable();
        fg.dedup();
        Ok(Self {
            height,
            width,
            classes,
            num_classes,
            fg_classes: fg,
        })
    }

    pub fn uniform(height: usize, width: usize, class: u8, num_classes: usize, fg: &[u8]) -> Result<Self> {
        Self::new(height, width, vec![class; height * width], num_classes, fg)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn fg_classes(&self) -> &[u8] {
        &self.fg_classes
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    pub fn is_foreground(&self, row: usize, col: usize) -> bool {
        self.fg_classes.binary_search(&self.at(row, col)).is_ok()
    }

    /// `[C, H, W]` heatmaps, one per class.
    pub fn one_hot<F: Real>(&self) -> Tensor<F> {
        let plane = self.height * self.width;
        let mut t = Tensor::zeros(&[self.num_classes, self.height, self.width]);
        let d = t.data_mut();
        for (p, &c) in self.classes.iter().enumerate() {
            d[c as usize * plane + p] = F::one();
        }
        t
    }

    /// Inverse of [`LabelMap::one_hot`]: channel-wise argmax.
    pub fn from_heatmaps<F: Real>(heat: &Tensor<F>, fg: &[u8]) -> Result<Self> {
        if heat.ndim() != 3 {
            return Err(Error::InvalidInput("heatmaps must be [C, H, W]".into()));
        }
        let (c, h, w) = (heat.dim(0), heat.dim(1), heat.dim(2));
        let plane = h * w;
        let classes = (0..plane)
            .map(|p| {
                (0..c)
                    .max_by(|&a, &b| {
                        heat.data()[a * plane + p]
                            .partial_cmp(&heat.data()[b * plane + p])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0) as u8
            })
            .collect();
        Self::new(h, w, classes, c, fg)
    }

    /// Binary `[1, H, W]` mask of foreground pixels.
    pub fn foreground_mask<F: Real>(&self) -> Tensor<F> {
        Tensor::from_fn(&[1, self.height, self.width], |p| {
            if self.fg_classes.binary_search(&self.classes[p]).is_ok() {
                F::one()
            } else {
                F::zero()
            }
        })
    }
}

/// One RGB colour per class, used by the label colouriser and by the
/// flat-coloured synthetic scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    colors: Vec<[f32; 3]>,
}

impl Palette {
    pub fn new(colors: Vec<[f32; 3]>) -> Result<Self> {
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("palette colour outside [0, 1]".into()));
        }
        Ok(Self { colors })
    }

    /// Fixed, well separated colours on the 8-bit lattice so that they
    /// survive PNG storage unchanged.
    pub fn standard(num_classes: usize) -> Self {
        const BASE: [[u8; 3]; 8] = [
            [64, 64, 64],
            [230, 40, 40],
            [40, 200, 60],
            [50, 90, 230],
            [240, 220, 40],
            [200, 60, 220],
            [40, 220, 220],
            [250, 150, 40],
        ];
        let colors = (0..num_classes)
            .map(|c| {
                let b = BASE[c % BASE.len()];
                let shift = (c / BASE.len()) as u8 * 17;
                [b[0], b[1], b[2]].map(|v| v.wrapping_add(shift) as f32 / 255.0)
            })
            .collect();
        Self { colors }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, class: u8) -> Option<[f32; 3]> {
        self.colors.get(class as usize).copied()
    }
}

/// Splits `[C, H, W]` heatmaps into foreground and background stacks,
/// each keeping ascending class order.
pub fn split_fg_bg<F: Real>(heatmaps: &Tensor<F>, fg_classes: &[u8]) -> Result<(Tensor<F>, Tensor<F>)> {
    if heatmaps.ndim() != 3 {
        return Err(Error::InvalidInput("heatmaps must be [C, H, W]".into()));
    }
    let c = heatmaps.dim(0);
    let is_fg: Vec<bool> = (0..c).map(|k| fg_classes.contains(&(k as u8))).collect();
    if let Some(&bad) = fg_classes.iter().find(|&&k| k as usize >= c) {
        return Err(Error::Config(format!("foreground class {bad} >= {c} channels")));
    }
    let n_fg = is_fg.iter().filter(|&&f| f).count();
    if n_fg == 0 || n_fg == c {
        return Err(Error::Config(format!(
            "foreground set must be a nonempty proper subset of {c} classes, got {n_fg}"
        )));
    }
    let pick = |want: bool| {
        let parts: Vec<Tensor<F>> = (0..c)
            .filter(|&k| is_fg[k] == want)
            .map(|k| heatmaps.narrow(0, k, 1))
            .collect();
        let refs: Vec<&Tensor<F>> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    };
    Ok((pick(true)?, pick(false)?))
}

/// Frames `I_0..I_T` as a `[T+1, 3, H, W]` tensor with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Tensor<f32>,
}

impl FrameSequence {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.ndim() != 4 || frames.dim(1) != 3 {
            return Err(Error::InvalidInput(format!(
                "frame sequence must be [T+1, 3, H, W], got {:?}",
                frames.shape()
            )));
        }
        if frames.dim(0) < 2 {
            return Err(Error::InvalidInput("frame sequence needs T >= 1".into()));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("frame values outside [0, 1]".into()));
        }
        Ok(Self { frames })
    }

    /// Number of predicted steps `T` (one less than the frame count).
    pub fn steps(&self) -> usize {
        self.frames.dim(0) - 1
    }

    pub fn height(&self) -> usize {
        self.frames.dim(2)
    }

    pub fn width(&self) -> usize {
        self.frames.dim(3)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.frames
    }

    pub fn frame(&self, t: usize) -> Tensor<f32> {
        self.frames.index0(t)
    }
}

/// Forward and backward displacement fields, each `[T, 2, H, W]` in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowVolume {
    pub forward: Tensor<f32>,
    pub backward: Tensor<f32>,
}

impl FlowVolume {
    pub fn new(forward: Tensor<f32>, backward: Tensor<f32>) -> Result<Self> {
        if forward.ndim() != 4 || forward.dim(1) != 2 {
            return Err(Error::InvalidInput(format!(
                "flow must be [T, 2, H, W], got {:?}",
                forward.shape()
            )));
        }
        backward.expect_shape(forward.shape())?;
        if !forward.all_finite() || !backward.all_finite() {
            return Err(Error::InvalidInput("non-finite flow value".into()));
        }
        Ok(Self { forward, backward })
    }

    pub fn zeros(steps: usize, height: usize, width: usize) -> Self {
        let z = Tensor::zeros(&[steps, 2, height, width]);
        Self {
            forward: z.clone(),
            backward: z,
        }
    }

    pub fn steps(&self) -> usize {
        self.forward.dim(0)
    }
}

/// Forward and backward soft masks, each `[T, 1, H, W]` in `[0, 1]`;
/// zero marks pixels without correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionVolume {
    pub forward: Tensor<f32>,
    pub backward: Tensor<f32>,
}

impl OcclusionVolume {
    pub fn new(forward: Tensor<f32>, backward: Tensor<f32>) -> Result<Self> {
        if forward.ndim() != 4 || forward.dim(1) != 1 {
            return Err(Error::InvalidInput(format!(
                "occlusion must be [T, 1, H, W], got {:?}",
                forward.shape()
            )));
        }
        backward.expect_shape(forward.shape())?;
        for t in [&forward, &backward] {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput("occlusion value outside [0, 1]".into()));
            }
        }
        Ok(Self { forward, backward })
    }

    pub fn ones(steps: usize, height: usize, width: usize) -> Self {
        let o = Tensor::ones(&[steps, 1, height, width]);
        Self {
            forward: o.clone(),
            backward: o,
        }
    }
}

/// Content and motion codes of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub content: Vec<f32>,
    pub motion: Vec<f32>,
    /// Posterior parameters; absent when the motion code came from the prior.
    pub mu: Option<Vec<f32>>,
    pub logvar: Option<Vec<f32>>,
}

/// One dataset entry: conditioning label map, frames and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub label: LabelMap,
    pub frames: FrameSequence,
    pub flows: FlowVolume,
    pub occlusions: OcclusionVolume,
    /// Label maps of frames `1..=T` (evaluation only).
    pub step_labels: Vec<LabelMap>,
}

impl Sample {
    pub fn steps(&self) -> usize {
        self.frames.steps()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_hot_single_pixel() {
        let l = LabelMap::new(1, 1, vec![2], 4, &[1]).unwrap();
        assert_eq!(l.one_hot::<f32>().data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_uniform() {
        let l = LabelMap::uniform(3, 2, 0, 3, &[1]).unwrap();
        let h = l.one_hot::<f32>();
        assert!(h.narrow(0, 0, 1).data().iter().all(|&v| v == 1.0));
        assert!(h.narrow(0, 1, 2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_checkerboard() {
        let l = LabelMap::new(2, 2, vec![0, 1, 1, 0], 2, &[1]).unwrap();
        let h = l.one_hot::<f32>();
        assert_eq!(h.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn invalid_class_rejected() {
        assert!(matches!(
            LabelMap::new(1, 2, vec![0, 4], 4, &[1]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn split_partitions() {
        let l = LabelMap::new(1, 3, vec![0, 1, 2], 3, &[2]).unwrap();
        let (fg, bg) = split_fg_bg(&l.one_hot::<f32>(), &[2]).unwrap();
        assert_eq!(fg.shape(), &[1, 1, 3]);
        assert_eq!(bg.shape(), &[2, 1, 3]);
        assert_eq!(fg.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn split_rejects_degenerate() {
        let h = LabelMap::uniform(2, 2, 0, 2, &[]).unwrap().one_hot::<f32>();
        assert!(matches!(split_fg_bg(&h, &[0, 1]), Err(Error::Config(_))));
        assert!(matches!(split_fg_bg(&h, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn split_all_background() {
        let h = LabelMap::uniform(2, 2, 0, 2, &[1]).unwrap().one_hot::<f32>();
        let (fg, _) = split_fg_bg(&h, &[1]).unwrap();
        assert!(fg.data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn one_hot_argmax_round_trip(
            (h, w, c, classes) in (1usize..6, 1usize..6, 2usize..7).prop_flat_map(|(h, w, c)| {
                (Just(h), Just(w), Just(c), proptest::collection::vec(0..c as u8, h * w))
            })
        ) {
            let l = LabelMap::new(h, w, classes, c, &[1]).unwrap();
            let heat = l.one_hot::<f32>();
            for p in 0..h * w {
                let s: f32 = (0..c).map(|k| heat.data()[k * h * w + p]).sum();
                prop_assert_eq!(s, 1.0);
            }
            prop_assert_eq!(LabelMap::from_heatmaps(&heat, &[1]).unwrap(), l);
        }

        #[test]
        fn split_channel_counts_sum(c in 2usize..8, mask in 1u32..255) {
            let fg: Vec<u8> = (0..c as u8).filter(|k| mask & (1 << k) != 0).collect();
            prop_assume!(!fg.is_empty() && fg.len() < c);
            let heat = LabelMap::uniform(2, 3, 0, c, &fg).unwrap().one_hot::<f32>();
            let (a, b) = split_fg_bg(&heat, &fg).unwrap();
            prop_assert_eq!(a.dim(0) + b.dim(0), c);
            prop_assert_eq!(a.dim(0), fg.len());
        }
    }
}
