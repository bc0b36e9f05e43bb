use crate::error::{Error, Result};

/// An input prefix and the item that follows it. Items are embedding-store rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub input: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub user: String,
    /// Everything but the last two interactions.
    pub train: Vec<usize>,
    pub val: Example,
    pub test: Example,
}

impl UserSplit {
    /// The full sequence the split was built from.
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.test.input.clone();
        s.push(self.test.target);
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub train_examples: Vec<Example>,
    /// Users removed for having fewer than three interactions.
    pub dropped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
}

impl SplitDataset {
    pub fn examples(&self, split: Split) -> Vec<&Example> {
        self.users
            .iter()
            .map(|u| match split {
                Split::Val => &u.val,
                Split::Test => &u.test,
            })
            .collect()
    }

    /// Σ max(0, train_len − 1) over users.
    pub fn expected_train_examples(&self) -> usize {
        self.users.iter().map(|u| u.train.len().saturating_sub(1)).sum()
    }

    /// Counts training examples that reach into the validation or test
    /// positions of their user's sequence, plus any malformed held-out example.
    pub fn leakage_violations(&self) -> usize {
        let mut bad = 0;
        for ex in &self.train_examples {
            let Some(u) = self.users.get(ex.user) else {
                bad += 1;
                continue;
            };
            let n = ex.input.len();
            let ok = n >= 1 && n < u.train.len() && u.train[..n] == ex.input[..] && u.train[n] == ex.target;
            if !ok {
                bad += 1;
            }
        }
        for u in &self.users {
            let seq = u.sequence();
            let n = seq.len();
            let ok = n >= 3
                && u.val.input == u.train
                && u.val.input[..] == seq[..n - 2]
                && u.val.target == seq[n - 2]
                && u.test.input[..] == seq[..n - 1];
            if !ok {
                bad += 1;
            }
        }
        bad
    }
}

/// `( [s_1..s_{t-1}], s_t )` for t = 2..len.
pub fn expand_subsequences(train: &[usize]) -> Vec<(Vec<usize>, usize)> {
    (1..train.len()).map(|t| (train[..t].to_vec(), train[t])).collect()
}

/// Last item for test, second-last for validation, the rest for training.
/// Users with fewer than three interactions are dropped.
pub fn leave_last_out_split(sequences: Vec<(String, Vec<usize>)>) -> Result<SplitDataset> {
    let mut ds = SplitDataset::default();
    for (user, seq) in sequences {
        let n = seq.len();
        if n < 3 {
            ds.dropped += 1;
            continue;
        }
        let idx = ds.users.len();
        let train = seq[..n - 2].to_vec();
        for (input, target) in expand_subsequences(&train) {
            ds.train_examples.push(Example {
                user: idx,
                input,
                target,
            });
        }
        ds.users.push(UserSplit {
            user,
            val: Example {
                user: idx,
                input: train.clone(),
                target: seq[n - 2],
            },
            test: Example {
                user: idx,
                input: seq[..n - 1].to_vec(),
                target: seq[n - 1],
            },
            train,
        });
    }
    if ds.dropped > 0 {
        log::info!("dropped {} users with fewer than 3 interactions", ds.dropped);
    }
    if ds.users.is_empty() {
        return Err(Error::Data("every user has fewer than 3 interactions".into()));
    }
    Ok(ds)
}
