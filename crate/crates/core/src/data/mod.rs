//! Implicit-feedback interaction data: loading, splitting and popularity.
//!
//! Interactions are binary. A user's relevant set is the sorted list of
//! items they interacted with; `train` and `test` hold disjoint portions of
//! that list for every user.

mod features;
mod manifest;
pub mod synthetic;

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use features::{load_features, FeatureMatrix};
pub use manifest::{DatasetManifest, LoadedData};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {kind} id {id} out of bounds (declared {bound})")]
    OutOfBounds {
        line: usize,
        kind: &'static str,
        id: usize,
        bound: usize,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("inconsistent counts: {0}")]
    Counts(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Sparse user → item store with a per-user train/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    train: Vec<Vec<usize>>,
    test: Vec<Vec<usize>>,
}

/// Totals in the shape of a dataset statistics table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_train: usize,
    pub num_test: usize,
}

impl DatasetStats {
    /// Checks that the interaction totals can exist in a catalog of the
    /// declared size: nonempty id spaces and no more interactions than
    /// user/item pairs.
    pub fn check_consistent(&self) -> Result<(), DataError> {
        if self.num_users == 0 || self.num_items == 0 {
            return Err(DataError::Counts("user and item counts must be positive".into()));
        }
        let capacity = self.num_users as u128 * self.num_items as u128;
        let total = self.num_train as u128 + self.num_test as u128;
        if total > capacity {
            return Err(DataError::Counts(format!(
                "{total} interactions exceed {} users x {} items",
                self.num_users, self.num_items
            )));
        }
        Ok(())
    }
}

impl InteractionDataset {
    /// Builds a dataset from per-user lists, sorting and deduplicating each
    /// list and dropping test items that also appear in train.
    pub fn from_lists(
        num_users: usize,
        num_items: usize,
        mut train: Vec<Vec<usize>>,
        mut test: Vec<Vec<usize>>,
    ) -> Result<Self, DataError> {
        if train.len() > num_users || test.len() > num_users {
            return Err(DataError::Counts(format!(
                "more user lists than declared users ({num_users})"
            )));
        }
        train.resize(num_users, Vec::new());
        test.resize(num_users, Vec::new());
        for (list_t, list_s) in train.iter_mut().zip(test.iter_mut()) {
            for list in [&mut *list_t, &mut *list_s] {
                list.sort_unstable();
                list.dedup();
                if let Some(&last) = list.last() {
                    if last >= num_items {
                        return Err(DataError::OutOfBounds {
                            line: 0,
                            kind: "item",
                            id: last,
                            bound: num_items,
                        });
                    }
                }
            }
            let t: &Vec<usize> = list_t;
            list_s.retain(|i| t.binary_search(i).is_err());
        }
        Ok(InteractionDataset {
            num_users,
            num_items,
            train,
            test,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Sorted train items of `user` (y_x restricted to the train portion).
    pub fn train_items(&self, user: usize) -> &[usize] {
        &self.train[user]
    }

    pub fn test_items(&self, user: usize) -> &[usize] {
        &self.test[user]
    }

    pub fn num_train(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    pub fn num_test(&self) -> usize {
        self.test.iter().map(Vec::len).sum()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            num_users: self.num_users,
            num_items: self.num_items,
            num_train: self.num_train(),
            num_test: self.num_test(),
        }
    }

    /// All `(user, item)` training pairs in user-major order.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
            .collect()
    }

    /// Training interaction count per item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items];
        for items in &self.train {
            for &i in items {
                counts[i] += 1;
            }
        }
        counts
    }
}

fn parse_id(field: Option<&str>, line: usize, what: &str) -> Result<usize, DataError> {
    let field = field.ok_or_else(|| DataError::Parse {
        line,
        message: format!("missing {what} field"),
    })?;
    field.trim().parse().map_err(|_| DataError::Parse {
        line,
        message: format!("{what} {field:?} is not an unsigned integer"),
    })
}

/// Reads `user_id<TAB>item_id` rows. Extra columns (e.g. a weight) are
/// ignored and duplicate rows collapse. Everything lands in `train`.
pub fn read_interactions<R: BufRead>(
    reader: R,
    num_users: usize,
    num_items: usize,
) -> Result<InteractionDataset, DataError> {
    let mut train = vec![Vec::new(); num_users];
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let user = parse_id(fields.next(), lineno, "user id")?;
        let item = parse_id(fields.next(), lineno, "item id")?;
        if user >= num_users {
            return Err(DataError::OutOfBounds {
                line: lineno,
                kind: "user",
                id: user,
                bound: num_users,
            });
        }
        if item >= num_items {
            return Err(DataError::OutOfBounds {
                line: lineno,
                kind: "item",
                id: item,
                bound: num_items,
            });
        }
        train[user].push(item);
    }
    InteractionDataset::from_lists(num_users, num_items, train, Vec::new())
}

pub fn load_interactions(path: &Path, num_users: usize, num_items: usize) -> Result<InteractionDataset, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_interactions(BufReader::new(file), num_users, num_items)
}

/// Writes per-user lists as `user<TAB>item` rows in user-major order.
pub fn write_interactions<W: Write>(mut writer: W, lists: &[Vec<usize>]) -> io::Result<()> {
    for (user, items) in lists.iter().enumerate() {
        for item in items {
            writeln!(writer, "{user}\t{item}")?;
        }
    }
    writer.flush()
}

/// Writes train and test interactions together, sorted per user.
pub fn save_interactions(path: &Path, dataset: &InteractionDataset) -> Result<(), DataError> {
    let merged: Vec<Vec<usize>> = dataset
        .train
        .iter()
        .zip(&dataset.test)
        .map(|(t, s)| {
            let mut all: Vec<usize> = t.iter().chain(s).copied().collect();
            all.sort_unstable();
            all
        })
        .collect();
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    write_interactions(BufWriter::new(file), &merged).map_err(|e| DataError::io(path, e))
}

/// Per-user random split of all interactions into train and test.
///
/// A user with `n >= 2` interactions gets `round(fraction * n)` test items,
/// capped at `n - 1`. A user with a single interaction keeps it in train.
pub fn split_interactions(
    dataset: &InteractionDataset,
    fraction: f64,
    seed: u64,
) -> Result<InteractionDataset, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Manifest(format!(
            "test fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(dataset.num_users);
    let mut test = Vec::with_capacity(dataset.num_users);
    for (t, s) in dataset.train.iter().zip(&dataset.test) {
        let mut all: Vec<usize> = t.iter().chain(s).copied().collect();
        all.sort_unstable();
        let n = all.len();
        let n_test = if n < 2 {
            0
        } else {
            ((fraction * n as f64).round() as usize).min(n - 1)
        };
        all.shuffle(&mut rng);
        let mut user_test = all.split_off(n - n_test);
        all.sort_unstable();
        user_test.sort_unstable();
        train.push(all);
        test.push(user_test);
    }
    Ok(InteractionDataset {
        num_users: dataset.num_users,
        num_items: dataset.num_items,
        train,
        test,
    })
}

/// All item ids ordered by descending train count, ties by ascending id.
pub fn popularity_ranking(dataset: &InteractionDataset) -> Vec<usize> {
    let counts = dataset.item_counts();
    let mut order: Vec<usize> = (0..dataset.num_items).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}
