//! Task definitions, decoder heads, task losses, and the metric suite.

pub mod heads;
pub mod loss;
pub mod metrics;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The dense prediction task families. Loss weights follow the multi-task
/// convention: 1 (semseg), 2 (parsing), 5 (saliency), 10 (normal),
/// 50 (boundary), 1 (depth).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Semseg,
    Parsing,
    Saliency,
    Normal,
    Boundary,
    Depth,
}

impl TaskKind {
    /// Default loss weight w_t for the task family.
    pub fn default_loss_weight(self) -> f64 {
        match self {
            TaskKind::Semseg => 1.0,
            TaskKind::Parsing => 2.0,
            TaskKind::Saliency => 5.0,
            TaskKind::Normal => 10.0,
            TaskKind::Boundary => 50.0,
            TaskKind::Depth => 1.0,
        }
    }

    /// Whether the task's metric improves downward.
    pub fn default_lower_is_better(self) -> bool {
        matches!(self, TaskKind::Normal | TaskKind::Depth)
    }

    /// Prediction channels produced by the head.
    pub fn out_channels(self, num_classes: usize) -> usize {
        match self {
            TaskKind::Semseg | TaskKind::Parsing => num_classes,
            TaskKind::Saliency | TaskKind::Boundary | TaskKind::Depth => 1,
            TaskKind::Normal => 3,
        }
    }

    pub fn is_segmentation(self) -> bool {
        matches!(self, TaskKind::Semseg | TaskKind::Parsing)
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Semseg | TaskKind::Parsing => "mIoU",
            TaskKind::Saliency => "maxF",
            TaskKind::Normal => "mErr",
            TaskKind::Boundary => "boundaryF",
            TaskKind::Depth => "RMSE",
        }
    }
}

/// One task's contract: loss family, weight, metric direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub loss_weight: Option<f64>,
    #[serde(default)]
    pub lower_is_better: Option<bool>,
}

fn default_classes() -> usize {
    2
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind) -> Self {
        TaskSpec {
            name: name.into(),
            kind,
            num_classes: 2,
            loss_weight: None,
            lower_is_better: None,
        }
    }

    pub fn weight(&self) -> f64 {
        self.loss_weight.unwrap_or(self.kind.default_loss_weight())
    }

    pub fn lower_better(&self) -> bool {
        self.lower_is_better
            .unwrap_or(self.kind.default_lower_is_better())
    }

    pub fn out_channels(&self) -> usize {
        self.kind.out_channels(self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight() <= 0.0 {
            return Err(Error::config(format!(
                "task {}: loss_weight must be > 0",
                self.name
            )));
        }
        if self.kind.is_segmentation() && self.num_classes < 2 {
            return Err(Error::config(format!(
                "task {}: segmentation requires >= 2 classes",
                self.name
            )));
        }
        Ok(())
    }
}

/// One evaluated metric value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub metric: String,
    pub value: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_follow_convention() {
        assert_eq!(TaskKind::Semseg.default_loss_weight(), 1.0);
        assert_eq!(TaskKind::Parsing.default_loss_weight(), 2.0);
        assert_eq!(TaskKind::Saliency.default_loss_weight(), 5.0);
        assert_eq!(TaskKind::Normal.default_loss_weight(), 10.0);
        assert_eq!(TaskKind::Boundary.default_loss_weight(), 50.0);
        assert_eq!(TaskKind::Depth.default_loss_weight(), 1.0);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = TaskSpec::new("seg", TaskKind::Semseg);
        spec.num_classes = 1;
        assert!(spec.validate().is_err());
        let mut spec = TaskSpec::new("seg", TaskKind::Semseg);
        spec.loss_weight = Some(0.0);
        assert!(spec.validate().is_err());
    }
}
