//! The class-incremental protocol: first-task adapter finetuning, the
//! frozen/finetuned composite encoder, prototype-only growth for later
//! tasks, metrics and sweeps.

mod features;
mod protocol;
mod sweep;
mod train;

use std::collections::BTreeSet;
use std::sync::Mutex;

use crate::data::Dataset;
use crate::error::{Error, Result};

pub use features::{
    build_composite, param_checksum, AdaptedEncoder, CompositeEncoder, FeatureExtractor,
    FrozenEncoder,
};
pub use protocol::{
    accuracy, avg_accuracy, evaluate, run_experiment, run_protocol, ProtocolOptions,
    ProtocolOutcome, RunReport, TaskRow,
};
pub use sweep::{
    apply_point, capacity_notes, expand_grid, sweep, sweep_threads, SweepAxis, SweepRow,
    SweepTable, KINDS_ALL8, POSITIONS_STANDARD,
};
pub use train::{
    finetune_task1, pretrain_encoder, CosineHead, CosineSchedule, FitReport, TrainRecipe,
};

/// One task: its classes and their samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One data access recorded by a [`TaskStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Access {
    /// Task being processed when the access happened.
    pub active: usize,
    pub task: usize,
    pub split: Split,
    pub allowed: bool,
}

/// Ordered tasks with disjoint class sets. Sample access goes through
/// [`TaskStream::train`] and [`TaskStream::test`], which log every read and
/// refuse training data of any task other than the active one, and test
/// data of future tasks.
#[derive(Debug)]
pub struct TaskStream {
    tasks: Vec<Task>,
    class_order: Vec<usize>,
    audit: Mutex<Vec<Access>>,
}

impl Clone for TaskStream {
    fn clone(&self) -> Self {
        Self {
            tasks: self.tasks.clone(),
            class_order: self.class_order.clone(),
            audit: Mutex::new(Vec::new()),
        }
    }
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>, class_order: Vec<usize>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (t, task) in tasks.iter().enumerate() {
            if task.classes.is_empty() {
                return Err(Error::contract(format!("task {} has no classes", t + 1)));
            }
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(Error::contract(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
            let own: BTreeSet<usize> = task.classes.iter().copied().collect();
            if let Some(l) = task
                .train
                .labels
                .iter()
                .chain(&task.test.labels)
                .find(|l| !own.contains(l))
            {
                return Err(Error::contract(format!(
                    "task {} holds a sample of foreign class {l}",
                    t + 1
                )));
            }
        }
        Ok(Self {
            tasks,
            class_order,
            audit: Mutex::new(Vec::new()),
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn classes(&self, task: usize) -> &[usize] {
        &self.tasks[task].classes
    }

    /// Class order the tasks were cut from.
    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    fn record(&self, active: usize, task: usize, split: Split, allowed: bool) {
        self.audit
            .lock()
            .expect("audit log poisoned")
            .push(Access {
                active,
                task,
                split,
                allowed,
            });
    }

    fn get(&self, task: usize) -> Result<&Task> {
        self.tasks.get(task).ok_or(Error::Range {
            what: "task",
            index: task,
            len: self.tasks.len(),
        })
    }

    /// Training samples of `task` while processing `active`.
    pub fn train(&self, active: usize, task: usize) -> Result<&Dataset> {
        let t = self.get(task)?;
        let allowed = task == active;
        self.record(active, task, Split::Train, allowed);
        if !allowed {
            return Err(Error::contract(format!(
                "training data of task {} requested while processing task {}",
                task + 1,
                active + 1
            )));
        }
        Ok(&t.train)
    }

    /// Test samples of `task` while processing `active`.
    pub fn test(&self, active: usize, task: usize) -> Result<&Dataset> {
        let t = self.get(task)?;
        let allowed = task <= active;
        self.record(active, task, Split::Test, allowed);
        if !allowed {
            return Err(Error::contract(format!(
                "test data of future task {} requested while processing task {}",
                task + 1,
                active + 1
            )));
        }
        Ok(&t.test)
    }

    pub fn audit_log(&self) -> Vec<Access> {
        self.audit.lock().expect("audit log poisoned").clone()
    }

    pub fn violations(&self) -> Vec<Access> {
        self.audit_log().into_iter().filter(|a| !a.allowed).collect()
    }

    /// Same first task, later tasks in the order `tail` (a permutation of
    /// `1..num_tasks`).
    pub fn permute_tail(&self, tail: &[usize]) -> Result<Self> {
        let mut sorted = tail.to_vec();
        sorted.sort_unstable();
        if self.tasks.is_empty() || sorted.iter().copied().ne(1..self.tasks.len()) {
            return Err(Error::contract(
                "tail order must be a permutation of the later tasks",
            ));
        }
        let tasks = std::iter::once(0)
            .chain(tail.iter().copied())
            .map(|i| self.tasks[i].clone())
            .collect();
        Self::new(tasks, self.class_order.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn ds(labels: &[usize]) -> Dataset {
        Dataset {
            images: labels.iter().map(|_| Tensor::zeros(&[1, 1, 1])).collect(),
            labels: labels.to_vec(),
        }
    }

    fn stream() -> TaskStream {
        let task = |c: [usize; 2]| Task {
            classes: c.to_vec(),
            train: ds(&c),
            test: ds(&c),
        };
        TaskStream::new(vec![task([0, 1]), task([2, 3]), task([4, 5])], (0..6).collect()).unwrap()
    }

    #[test]
    fn overlapping_classes_rejected() {
        let t = Task {
            classes: vec![0],
            train: ds(&[0]),
            test: ds(&[0]),
        };
        assert!(TaskStream::new(vec![t.clone(), t], vec![0]).is_err());
    }

    #[test]
    fn audit_flags_cross_task_reads() {
        let s = stream();
        assert!(s.train(1, 1).is_ok());
        assert!(s.test(1, 0).is_ok());
        assert!(s.train(1, 0).is_err());
        assert!(s.test(1, 2).is_err());
        assert_eq!(s.audit_log().len(), 4);
        assert_eq!(s.violations().len(), 2);
    }

    #[test]
    fn permute_tail_keeps_first() {
        let s = stream().permute_tail(&[2, 1]).unwrap();
        assert_eq!(s.classes(0), &[0, 1]);
        assert_eq!(s.classes(1), &[4, 5]);
        assert!(stream().permute_tail(&[0, 1]).is_err());
    }
}
