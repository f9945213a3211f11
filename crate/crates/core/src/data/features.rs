use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::DataError;

/// Sparse entity × feature weights. Row `e` lists `(feature_id, weight)`
/// pairs with strictly increasing feature ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    num_features: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl FeatureMatrix {
    /// One indicator feature per entity: entity `e` maps to feature `e`
    /// with weight 1.
    pub fn identity(num_entities: usize) -> Self {
        FeatureMatrix {
            num_features: num_entities,
            rows: (0..num_entities).map(|e| vec![(e, 1.0)]).collect(),
        }
    }

    pub fn from_rows(num_features: usize, mut rows: Vec<Vec<(usize, f64)>>) -> Result<Self, DataError> {
        for (entity, row) in rows.iter_mut().enumerate() {
            if row.is_empty() {
                return Err(DataError::Counts(format!("entity {entity} has no features")));
            }
            row.sort_by_key(|&(f, _)| f);
            if row.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(DataError::Counts(format!("entity {entity} lists a feature twice")));
            }
            if let Some(&(f, _)) = row.last() {
                if f >= num_features {
                    return Err(DataError::OutOfBounds {
                        line: 0,
                        kind: "feature",
                        id: f,
                        bound: num_features,
                    });
                }
            }
            if row.iter().any(|&(_, w)| !w.is_finite()) {
                return Err(DataError::Counts(format!("entity {entity} has a non-finite weight")));
            }
        }
        Ok(FeatureMatrix { num_features, rows })
    }

    /// Identity features followed by attribute features. Attribute feature
    /// `a` of the input becomes feature `num_entities + a`.
    pub fn with_attributes(attributes: Vec<Vec<(usize, f64)>>, num_attributes: usize) -> Result<Self, DataError> {
        let n = attributes.len();
        let rows = attributes
            .into_iter()
            .enumerate()
            .map(|(e, attrs)| {
                let mut row = Vec::with_capacity(attrs.len() + 1);
                row.push((e, 1.0));
                row.extend(attrs.into_iter().map(|(a, w)| (n + a, w)));
                row
            })
            .collect();
        Self::from_rows(n + num_attributes, rows)
    }

    pub fn num_entities(&self) -> usize {
        self.rows.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn row(&self, entity: usize) -> &[(usize, f64)] {
        &self.rows[entity]
    }

    /// Mean number of features per entity.
    pub fn mean_row_len(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(Vec::len).sum::<usize>() as f64 / self.rows.len() as f64
    }
}

/// Reads `entity<TAB>feature<TAB>weight` rows and returns identity features
/// plus the file's attributes (see [`FeatureMatrix::with_attributes`]).
pub fn read_features<R: BufRead>(reader: R, num_entities: usize) -> Result<FeatureMatrix, DataError> {
    let mut attributes: Vec<Vec<(usize, f64)>> = vec![Vec::new(); num_entities];
    let mut num_attributes = 0;
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
        let entity = super::parse_id(fields.next(), lineno, "entity id")?;
        let feature = super::parse_id(fields.next(), lineno, "feature id")?;
        let weight: f64 = match fields.next() {
            Some(w) => w.trim().parse().map_err(|_| DataError::Parse {
                line: lineno,
                message: format!("weight {w:?} is not a real number"),
            })?,
            None => {
                return Err(DataError::Parse {
                    line: lineno,
                    message: "missing weight field".into(),
                })
            }
        };
        if entity >= num_entities {
            return Err(DataError::OutOfBounds {
                line: lineno,
                kind: "entity",
                id: entity,
                bound: num_entities,
            });
        }
        let row = &mut attributes[entity];
        if row.iter().any(|&(f, _)| f == feature) {
            return Err(DataError::Parse {
                line: lineno,
                message: format!("feature {feature} repeated for entity {entity}"),
            });
        }
        row.push((feature, weight));
        num_attributes = num_attributes.max(feature + 1);
    }
    FeatureMatrix::with_attributes(attributes, num_attributes)
}

pub fn load_features(path: &Path, num_entities: usize) -> Result<FeatureMatrix, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_features(BufReader::new(file), num_entities)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_rows() {
        let m = FeatureMatrix::identity(3);
        assert_eq!(m.num_features(), 3);
        assert_eq!(m.row(2), &[(2, 1.0)]);
    }

    #[test]
    fn file_attributes_follow_identity_block() {
        let m = read_features("0\t1\t0.5\n2\t0\t1\n".as_bytes(), 3).unwrap();
        assert_eq!(m.num_features(), 3 + 2);
        assert_eq!(m.row(0), &[(0, 1.0), (4, 0.5)]);
        assert_eq!(m.row(1), &[(1, 1.0)]);
        assert_eq!(m.row(2), &[(2, 1.0), (3, 1.0)]);
    }

    #[test]
    fn bad_feature_rows() {
        assert!(matches!(
            read_features("0\t1\tabc\n".as_bytes(), 1),
            Err(DataError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_features("5\t1\t1\n".as_bytes(), 2),
            Err(DataError::OutOfBounds { kind: "entity", .. })
        ));
        assert!(read_features("0\t1\t1\n0\t1\t2\n".as_bytes(), 1).is_err());
    }

    #[test]
    fn from_rows_validates() {
        assert!(FeatureMatrix::from_rows(2, vec![vec![]]).is_err());
        assert!(FeatureMatrix::from_rows(2, vec![vec![(2, 1.0)]]).is_err());
        let m = FeatureMatrix::from_rows(4, vec![vec![(3, 1.0), (1, 2.0)]]).unwrap();
        assert_eq!(m.row(0), &[(1, 2.0), (3, 1.0)]);
    }
}
