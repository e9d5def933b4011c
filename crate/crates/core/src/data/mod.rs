//! Bi-temporal image pairs: synthetic generation, directory loading and
//! paired augmentation.
//!
//! Images are `[3, H, W]` tensors with values in `[0, 1]`.

mod augment;
mod io;
mod synth;

pub use augment::{augment, AugmentConfig, AugmentDraw};
pub use io::{
    binarize_label, load_pair_dataset, load_rgb, save_gray, save_mask, save_rgb, write_split,
    Split,
};
pub use synth::{generate_split, generate_synthetic, SynthSpec};

use crate::cam::ImageLabel;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub pre: Tensor,
    pub post: Tensor,
    pub y_cls: ImageLabel,
    /// Pixel ground truth, used only for evaluation and label re-derivation.
    pub gt: Option<BinaryMask>,
}

impl ImagePair {
    pub fn new(
        id: impl Into<String>,
        pre: Tensor,
        post: Tensor,
        y_cls: ImageLabel,
        gt: Option<BinaryMask>,
    ) -> Result<Self> {
        let id = id.into();
        if pre.shape() != post.shape() || pre.shape().len() != 3 || pre.shape()[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "pair {id}: pre {:?} vs post {:?}",
                pre.shape(),
                post.shape()
            )));
        }
        if let Some(g) = &gt {
            if g.dims() != (pre.shape()[1], pre.shape()[2]) {
                return Err(Error::ShapeMismatch(format!("pair {id}: ground truth size")));
            }
            if derive_image_label(g) != y_cls {
                return Err(Error::Label(format!("pair {id}: label disagrees with ground truth")));
            }
        }
        Ok(Self {
            id,
            pre,
            post,
            y_cls,
            gt,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.pre.shape()[1], self.pre.shape()[2])
    }
}

/// Changed iff any ground-truth pixel is changed.
pub fn derive_image_label(gt: &BinaryMask) -> ImageLabel {
    ImageLabel::from_changed(gt.any())
}

/// Stack pairs into `([N, 3, H, W], [N, 3, H, W])` batches.
pub fn stack_pairs<'a>(pairs: impl IntoIterator<Item = &'a ImagePair>) -> (Tensor, Tensor) {
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for p in pairs {
        let (h, w) = p.dims();
        pre.push(p.pre.clone().reshape(&[1, 3, h, w]));
        post.push(p.post.clone().reshape(&[1, 3, h, w]));
    }
    (Tensor::stack(&pre), Tensor::stack(&post))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_from_gt() {
        assert_eq!(derive_image_label(&BinaryMask::zeros(4, 4)), ImageLabel::UNCHANGED);
        let mut g = BinaryMask::zeros(4, 4);
        g.set(3, 1, true);
        assert_eq!(derive_image_label(&g), ImageLabel::CHANGED);
    }

    #[test]
    fn pair_rejects_inconsistent_label() {
        let t = Tensor::zeros(&[3, 2, 2]);
        let err = ImagePair::new("x", t.clone(), t.clone(), ImageLabel::CHANGED, Some(BinaryMask::zeros(2, 2)));
        assert!(matches!(err, Err(Error::Label(_))));
        assert!(ImagePair::new("x", t.clone(), Tensor::zeros(&[3, 2, 4]), ImageLabel::UNCHANGED, None).is_err());
    }
}
