//! Task identities, metric directions and default loss weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Seg,
    Depth,
    Normals,
    Edges,
}

/// Whether larger metric values are better. Encodes `g_i` of the delta
/// metric: `Higher` is `g = 0`, `Lower` is `g = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Higher,
    Lower,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Higher => 1.0,
            Direction::Lower => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Higher => "higher",
            Direction::Lower => "lower",
        }
    }
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Seg, Task::Depth, Task::Normals, Task::Edges];

    pub fn name(self) -> &'static str {
        match self {
            Task::Seg => "seg",
            Task::Depth => "depth",
            Task::Normals => "normals",
            Task::Edges => "edges",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Task::Seg => 'S',
            Task::Depth => 'D',
            Task::Normals => 'N',
            Task::Edges => 'E',
        }
    }

    /// Name of the evaluation metric.
    pub fn metric(self) -> &'static str {
        match self {
            Task::Seg => "miou",
            Task::Depth => "rmse",
            Task::Normals => "mean_angular_error",
            Task::Edges => "f1",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Task::Seg | Task::Edges => Direction::Higher,
            Task::Depth | Task::Normals => Direction::Lower,
        }
    }

    /// Output channels of the prediction head.
    pub fn channels(self, num_classes: usize) -> usize {
        match self {
            Task::Seg => num_classes,
            Task::Depth | Task::Edges => 1,
            Task::Normals => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s || s.len() == 1 && s.starts_with(t.letter()))
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

/// Grid-searched loss weights for the task sets `S-D`, `S-D-N` and
/// `S-D-N-E`; other sets fall back to unit weights.
pub fn default_weights(tasks: &[Task]) -> Vec<f64> {
    let mut sorted = tasks.to_vec();
    sorted.sort();
    let table: &[(Task, f64)] = match sorted[..] {
        [Task::Seg, Task::Depth] => &[(Task::Seg, 50.0), (Task::Depth, 1.0)],
        [Task::Seg, Task::Depth, Task::Normals] => &[(Task::Seg, 100.0), (Task::Depth, 1.0), (Task::Normals, 100.0)],
        [Task::Seg, Task::Depth, Task::Normals, Task::Edges] => {
            &[(Task::Seg, 100.0), (Task::Depth, 1.0), (Task::Normals, 100.0), (Task::Edges, 50.0)]
        }
        _ => &[],
    };
    tasks
        .iter()
        .map(|t| table.iter().find(|(k, _)| k == t).map_or(1.0, |(_, w)| *w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_per_task_set() {
        assert_eq!(default_weights(&[Task::Seg, Task::Depth]), vec![50.0, 1.0]);
        assert_eq!(default_weights(&[Task::Depth, Task::Normals, Task::Seg]), vec![1.0, 100.0, 100.0]);
        assert_eq!(default_weights(&Task::ALL), vec![100.0, 1.0, 100.0, 50.0]);
        assert_eq!(default_weights(&[Task::Normals]), vec![1.0]);
    }

    #[test]
    fn parses_names_and_letters() {
        assert_eq!("depth".parse::<Task>().unwrap(), Task::Depth);
        assert_eq!("N".parse::<Task>().unwrap(), Task::Normals);
        assert!("x".parse::<Task>().is_err());
    }
}
