//! Planted-cluster implicit feedback generator for trend and smoke tests.
//!
//! Users and items are assigned round-robin to latent clusters. Each user
//! draws most of their items from their own cluster and the rest from the
//! whole catalog, with a Zipf-like item popularity skew in both cases, so a
//! popularity ranker gets some signal while a latent-factor model can do
//! much better.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FeatureMatrix, InteractionDataset};

#[derive(Debug, Clone)]
pub struct PlantedClusters {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Probability that an interaction comes from the user's own cluster.
    pub in_cluster: f64,
    /// Exponent of the popularity power law.
    pub popularity_exponent: f64,
}

impl Default for PlantedClusters {
    fn default() -> Self {
        PlantedClusters {
            num_users: 200,
            num_items: 500,
            num_clusters: 20,
            min_interactions: 15,
            max_interactions: 30,
            in_cluster: 0.8,
            popularity_exponent: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// All interactions, held in the train portion (split separately).
    pub interactions: InteractionDataset,
    /// Identity features plus one cluster-indicator attribute per item.
    pub item_features: FeatureMatrix,
    pub user_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
}

impl PlantedClusters {
    pub fn generate(&self, seed: u64) -> SyntheticData {
        assert!(self.num_clusters >= 1 && self.num_items >= self.num_clusters);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_cluster: Vec<usize> = (0..self.num_users).map(|u| u % self.num_clusters).collect();
        let item_cluster: Vec<usize> = (0..self.num_items).map(|i| i % self.num_clusters).collect();

        let mut popularity_rank: Vec<usize> = (0..self.num_items).collect();
        popularity_rank.shuffle(&mut rng);
        let weight: Vec<f64> = popularity_rank
            .iter()
            .map(|&r| 1.0 / ((r + 1) as f64).powf(self.popularity_exponent))
            .collect();

        let members: Vec<Vec<usize>> = (0..self.num_clusters)
            .map(|c| (0..self.num_items).filter(|&i| item_cluster[i] == c).collect())
            .collect();

        let mut lists = Vec::with_capacity(self.num_users);
        for &c in &user_cluster {
            let target = rng
                .random_range(self.min_interactions..=self.max_interactions)
                .min(self.num_items);
            let outside: Vec<usize> = (0..self.num_items).filter(|&i| item_cluster[i] != c).collect();
            let n_in = (0..target)
                .filter(|_| rng.random::<f64>() < self.in_cluster)
                .count()
                .min(members[c].len());
            let n_out = (target - n_in).min(outside.len());
            let mut items: Vec<usize> = members[c]
                .choose_multiple_weighted(&mut rng, n_in, |&i| weight[i])
                .expect("positive weights")
                .copied()
                .collect();
            items.extend(
                outside
                    .choose_multiple_weighted(&mut rng, n_out, |&i| weight[i])
                    .expect("positive weights")
                    .copied(),
            );
            lists.push(items);
        }
        let interactions = InteractionDataset::from_lists(self.num_users, self.num_items, lists, Vec::new())
            .expect("generated ids are in range");
        let attributes = item_cluster.iter().map(|&c| vec![(c, 1.0)]).collect();
        let item_features =
            FeatureMatrix::with_attributes(attributes, self.num_clusters).expect("cluster attributes are valid");
        SyntheticData {
            interactions,
            item_features,
            user_cluster,
            item_cluster,
        }
    }
}
