use super::maml::{Learner, VarMap};
use crate::autodiff::{Graph, Var};
use crate::data::ParaphrasePair;
use crate::error::Result;
use crate::model::{pairs_loss, Bindings, ModelConfig, ParamStore, Reduction};

/// Teacher-forced NLL of paraphrase pairs, with every stored parameter
/// outside `phi` held constant.
pub struct SeqLearner<'a> {
    pub cfg: &'a ModelConfig,
    pub store: &'a ParamStore,
    pub reduction: Reduction,
}

impl<'a> SeqLearner<'a> {
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore) -> Self {
        SeqLearner { cfg, store, reduction: Reduction::Mean }
    }
}

impl Learner for SeqLearner<'_> {
    type Batch = Vec<ParaphrasePair>;

    fn loss(&self, g: &mut Graph, phi: &VarMap, batch: &Vec<ParaphrasePair>) -> Result<Var> {
        let mut b = Bindings::constants(g, self.store);
        b.overlay(phi);
        pairs_loss(g, &b, self.cfg, batch, self.reduction)
    }

    fn batch_is_empty(&self, batch: &Vec<ParaphrasePair>) -> bool {
        batch.is_empty()
    }
}
