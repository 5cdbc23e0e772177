use crate::error::{Error, Result};
use crate::executor::{evaluate, fine_tune, Dataset, TrainConfig};
use crate::graph::{ChannelGroups, ModelGraph};
use crate::importance::{group_importance, GroupImportance, ImportanceState, ReductionConfig};

pub struct StepTraining {
    /// The node's model after this step's fine-tuning.
    pub model: ModelGraph,
    /// Per-group importance, indexed by the node's own channel positions.
    pub importance: GroupImportance,
    pub batches: usize,
}

/// Supplies per-step fine-tuning and channel importance for alive nodes.
pub trait StepTrainer: Sync {
    /// `kept` holds the node's remaining root channel indices per group.
    fn step(
        &self,
        model: &ModelGraph,
        groups: &ChannelGroups,
        kept: &[Vec<usize>],
        is_root: bool,
        seed: u64,
    ) -> Result<StepTraining>;

    /// Final fine-tuning of a surviving model; returns validation accuracy.
    fn finish(&self, model: &mut ModelGraph, seed: u64) -> Result<Option<f64>>;

    fn accuracy(&self, model: &ModelGraph) -> Result<Option<f64>>;
}

/// Gathers importance from backpropagation on the training split, updating
/// weights when fine-tuning is enabled. The root is never updated.
pub struct GradientTrainer<'a> {
    pub data: &'a Dataset,
    pub train: TrainConfig,
    pub reductions: ReductionConfig,
    pub finetune: bool,
    pub final_batches: usize,
}

impl StepTrainer for GradientTrainer<'_> {
    fn step(
        &self,
        model: &ModelGraph,
        groups: &ChannelGroups,
        _kept: &[Vec<usize>],
        is_root: bool,
        seed: u64,
    ) -> Result<StepTraining> {
        let mut model = model.clone();
        let mut state = ImportanceState::new(&model);
        let update = self.finetune && !is_root;
        fine_tune(
            &mut model,
            &self.data.train,
            &self.train,
            self.train.batches_per_step,
            seed,
            update,
            |m, g| state.accumulate(m, g),
        )?;
        let importance = group_importance(&state, &model, groups, self.reductions)?;
        Ok(StepTraining {
            model,
            importance,
            batches: state.batches(),
        })
    }

    fn finish(&self, model: &mut ModelGraph, seed: u64) -> Result<Option<f64>> {
        if self.finetune && self.final_batches > 0 {
            fine_tune(model, &self.data.train, &self.train, self.final_batches, seed, true, |_, _| Ok(()))?;
        }
        self.accuracy(model)
    }

    fn accuracy(&self, model: &ModelGraph) -> Result<Option<f64>> {
        Ok(Some(evaluate(model, &self.data.validation)?))
    }
}

/// Importance fixed once on the root model, e.g. computed externally. Nodes
/// see the entries of their remaining root channels; weights never change.
pub struct FixedImportance {
    root: GroupImportance,
}

impl FixedImportance {
    pub fn new(root: GroupImportance) -> Self {
        Self { root }
    }
}

impl StepTrainer for FixedImportance {
    fn step(
        &self,
        model: &ModelGraph,
        groups: &ChannelGroups,
        kept: &[Vec<usize>],
        _is_root: bool,
        _seed: u64,
    ) -> Result<StepTraining> {
        if self.root.per_group.len() != groups.len() || kept.len() != groups.len() {
            return Err(Error::Shape(format!(
                "importance covers {} groups, model has {}",
                self.root.per_group.len(),
                groups.len()
            )));
        }
        let per_group = kept
            .iter()
            .zip(&self.root.per_group)
            .map(|(k, imp)| {
                k.iter()
                    .map(|&c| {
                        imp.get(c)
                            .copied()
                            .ok_or_else(|| Error::Shape(format!("channel {c} outside importance vector")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(StepTraining {
            model: model.clone(),
            importance: GroupImportance { per_group },
            batches: 0,
        })
    }

    fn finish(&self, _model: &mut ModelGraph, _seed: u64) -> Result<Option<f64>> {
        Ok(None)
    }

    fn accuracy(&self, _model: &ModelGraph) -> Result<Option<f64>> {
        Ok(None)
    }
}
