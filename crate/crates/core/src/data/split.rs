//! Train/validation/test partitions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Meta;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Contiguous subject-id ranges; `ratios` count subjects.
    SubjectWise,
    /// Trial-order partition inside every (subject, session); `ratios`
    /// count trials per session, scaled by a whole factor when a session
    /// holds a multiple of their sum.
    WithinSession,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub protocol: Protocol,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn parts(&self) -> [(&'static str, &[usize]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

fn part_of(pos: usize, ratios: &[usize; 3]) -> usize {
    if pos < ratios[0] {
        0
    } else if pos < ratios[0] + ratios[1] {
        1
    } else {
        2
    }
}

pub fn split_dataset(meta: &Meta, protocol: Protocol, ratios: [usize; 3]) -> Result<DatasetSplit> {
    let total: usize = ratios.iter().sum();
    let mut parts: [Vec<usize>; 3] = Default::default();
    match protocol {
        Protocol::SubjectWise => {
            let mut subjects: Vec<u32> = meta.subjects.clone();
            subjects.sort_unstable();
            subjects.dedup();
            if total != subjects.len() {
                return Err(Error::Config(format!(
                    "subject ratios {ratios:?} sum to {total}, dataset has {} subjects",
                    subjects.len()
                )));
            }
            let rank: BTreeMap<u32, usize> = subjects.iter().enumerate().map(|(i, &s)| (s, i)).collect();
            for (i, s) in meta.subjects.iter().enumerate() {
                parts[part_of(rank[s], &ratios)].push(i);
            }
        }
        Protocol::WithinSession => {
            let mut sessions: BTreeMap<(u32, u32), Vec<(u32, usize)>> = BTreeMap::new();
            for i in 0..meta.len() {
                sessions.entry((meta.subjects[i], meta.sessions[i])).or_default().push((meta.trials[i], i));
            }
            for ((subj, sess), mut trials) in sessions {
                if total == 0 || trials.is_empty() || trials.len() % total != 0 {
                    return Err(Error::Config(format!(
                        "trial ratios {ratios:?} sum to {total}, subject {subj} session {sess} has {} trials",
                        trials.len()
                    )));
                }
                let k = trials.len() / total;
                let scaled = ratios.map(|r| r * k);
                trials.sort_unstable();
                for (pos, (_, i)) in trials.into_iter().enumerate() {
                    parts[part_of(pos, &scaled)].push(i);
                }
            }
            for p in &mut parts {
                p.sort_unstable();
            }
        }
    }
    let [train, val, test] = parts;
    Ok(DatasetSplit { protocol, train, val, test })
}
