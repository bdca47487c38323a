//! Backbone, jigsaw head and segmentation head, with hand-written backward passes.

mod backbone;
mod jigsaw;
pub mod layers;
mod params;
mod seg;

pub use backbone::{Backbone, BackboneTape, FeatureMap, ForwardMode, UnitKeys};
pub use jigsaw::{
    head_param_count, jigsaw_head_forward, pool_cells, unpool_cells, CellFeatures, HeadCache, HeadMode,
    JigsawHead, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT, HEAD_DIM, REDUCE_BIAS, REDUCE_WEIGHT,
};
pub use layers::Act;
pub use params::{Init, ParamGroup, ParamSpec, ParamStore};
pub use seg::{pixel_cross_entropy, predict_classes, SegCache, SegHead, IGNORE_LABEL, SEG_BIAS, SEG_WEIGHT};

use crate::archspec::{cell_assignment, ArchSpec, CellAssignment};
use crate::error::{Error, Result};
use crate::planar::Planar;
use crate::puzzle::GridSpec;
use crate::tensor::Real;

/// Evaluation-mode features of one image.
pub fn backbone_forward<T: Real>(backbone: &Backbone, params: &ParamStore<T>, image: &Planar<f32>) -> Result<FeatureMap<T>> {
    let input = Act::from_images(&[image])?;
    backbone
        .forward(params, &input, &ForwardMode::eval(backbone.num_layers()))
        .map(|(fm, _)| fm)
}

/// Backbone plus center-referenced location head.
#[derive(Clone, Debug, PartialEq)]
pub struct JigsawNet {
    pub backbone: Backbone,
    pub head: JigsawHead,
    pub grid: GridSpec,
}

pub struct JigsawPass<T> {
    /// Rows `batch * cells`, `cells` wide.
    pub logits: Vec<T>,
    pub assignment: CellAssignment,
    tape: BackboneTape<T>,
    head_cache: HeadCache<T>,
}

impl<T> JigsawPass<T> {
    pub fn tape(&self) -> &BackboneTape<T> {
        &self.tape
    }
}

impl JigsawNet {
    pub fn new(arch: ArchSpec, batch_norm: bool, grid: GridSpec, hidden: usize) -> Result<Self> {
        let backbone = Backbone::new(arch, batch_norm)?;
        let head = JigsawHead::new(backbone.out_channels(), hidden, grid.num_cells())?;
        Ok(Self { backbone, head, grid })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.backbone.param_specs();
        specs.extend(self.head.param_specs());
        specs
    }

    /// Cell assignment for `(h, w)` inputs, checked against the backbone's actual output size.
    pub fn assignment(&self, h: usize, w: usize) -> Result<CellAssignment> {
        let a = cell_assignment(&self.backbone.profile(), (h, w), self.grid)?;
        let actual = self.backbone.output_size(h, w)?;
        if actual != (a.feat_h, a.feat_w) {
            return Err(Error::Shape(format!(
                "backbone produces {}x{} features for {h}x{w}, receptive-field geometry predicts {}x{}",
                actual.0, actual.1, a.feat_h, a.feat_w
            )));
        }
        Ok(a)
    }

    pub fn forward<T: Real>(&self, params: &ParamStore<T>, input: &Act<T>, mode: &ForwardMode) -> Result<JigsawPass<T>> {
        let assignment = self.assignment(input.h, input.w)?;
        let (fm, tape) = self.backbone.forward(params, input, mode)?;
        let cells = pool_cells(&fm.values, &assignment)?;
        let (logits, head_cache) = self.head.forward(params, &cells)?;
        Ok(JigsawPass { logits, assignment, tape, head_cache })
    }

    pub fn backward<T: Real>(&self, params: &ParamStore<T>, pass: &JigsawPass<T>, d_logits: &[T], grads: &mut ParamStore<T>) {
        let d_cells = self.head.backward(params, &pass.head_cache, d_logits, grads);
        let d_fm = unpool_cells(&d_cells, &pass.assignment);
        self.backbone.backward(params, &pass.tape, d_fm, grads);
    }
}

/// Backbone plus FCN32-style classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub backbone: Backbone,
    pub head: SegHead,
}

pub struct SegPass<T> {
    /// `classes x batch x H x W`.
    pub scores: Act<T>,
    tape: BackboneTape<T>,
    cache: SegCache<T>,
    backbone_trains: bool,
}

impl<T> SegPass<T> {
    pub fn tape(&self) -> &BackboneTape<T> {
        &self.tape
    }
}

impl SegNet {
    pub fn new(arch: ArchSpec, batch_norm: bool, classes: usize) -> Result<Self> {
        let backbone = Backbone::new(arch, batch_norm)?;
        let head = SegHead::new(backbone.out_channels(), classes, backbone.profile())?;
        Ok(Self { backbone, head })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.backbone.param_specs();
        specs.extend(self.head.param_specs());
        specs
    }

    pub fn forward<T: Real>(&self, params: &ParamStore<T>, input: &Act<T>, mode: &ForwardMode) -> Result<SegPass<T>> {
        let (fm, tape) = self.backbone.forward(params, input, mode)?;
        let (scores, cache) = self.head.forward(params, &fm.values, (input.h, input.w))?;
        let backbone_trains = mode.train && mode.trainable.iter().any(|t| *t);
        Ok(SegPass { scores, tape, cache, backbone_trains })
    }

    pub fn backward<T: Real>(&self, params: &ParamStore<T>, pass: &SegPass<T>, d_scores: &Act<T>, grads: &mut ParamStore<T>) {
        if let Some(d_fm) = self.head.backward(params, &pass.cache, d_scores, grads, pass.backbone_trains) {
            self.backbone.backward(params, &pass.tape, d_fm, grads);
        }
    }
}

/// Evaluation-mode class scores at input resolution for one image.
pub fn seg_forward<T: Real>(net: &SegNet, params: &ParamStore<T>, image: &Planar<f32>) -> Result<Act<T>> {
    let input = Act::from_images(&[image])?;
    net.forward(params, &input, &ForwardMode::eval(net.backbone.num_layers()))
        .map(|p| p.scores)
}
