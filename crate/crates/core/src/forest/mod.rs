//! Online Mondrian forest for classification and regression over mixed
//! numeric and categorical inputs.

mod tree;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use tree::NodeView;
use tree::Tree;

pub const FOREST_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TREES: usize = 25;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub cardinality: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub numeric: Vec<String>,
    pub categorical: Vec<CategoricalFeature>,
}

impl FeatureSchema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn numeric(mut self, name: impl Into<String>) -> Self {
        self.numeric.push(name.into());
        self
    }

    pub fn categorical(mut self, name: impl Into<String>, cardinality: u32) -> Self {
        self.categorical.push(CategoricalFeature {
            name: name.into(),
            cardinality,
        });
        self
    }

    /// Width of the one-hot encoded split space.
    pub fn encoded_dim(&self) -> usize {
        self.numeric.len() + self.categorical.iter().map(|c| c.cardinality as usize).sum::<usize>()
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.numeric
            .iter()
            .map(String::as_str)
            .chain(self.categorical.iter().map(|c| c.name.as_str()))
            .collect()
    }

    /// Original feature index for every encoded dimension.
    fn owners(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.numeric.len()).collect();
        for (i, c) in self.categorical.iter().enumerate() {
            out.extend(std::iter::repeat_n(self.numeric.len() + i, c.cardinality as usize));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let names = self.feature_names();
        if names.is_empty() {
            return Err(Error::Schema("feature schema is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if !seen.insert(*n) {
                return Err(Error::Schema(format!("duplicate feature name {n}")));
            }
        }
        if self.categorical.iter().any(|c| c.cardinality == 0) {
            return Err(Error::Schema("categorical cardinality must be positive".into()));
        }
        Ok(())
    }

    pub fn encode(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        if x.numeric.len() != self.numeric.len() || x.categorical.len() != self.categorical.len() {
            return Err(Error::Schema(format!(
                "expected {} numeric and {} categorical values, got {} and {}",
                self.numeric.len(),
                self.categorical.len(),
                x.numeric.len(),
                x.categorical.len()
            )));
        }
        let mut out = Vec::with_capacity(self.encoded_dim());
        for (v, name) in x.numeric.iter().zip(&self.numeric) {
            if !v.is_finite() {
                return Err(Error::Schema(format!("feature {name} is not finite")));
            }
            out.push(*v);
        }
        for (v, c) in x.categorical.iter().zip(&self.categorical) {
            if *v >= c.cardinality {
                return Err(Error::Schema(format!(
                    "feature {} value {v} outside cardinality {}",
                    c.name, c.cardinality
                )));
            }
            out.extend((0..c.cardinality).map(|k| if k == *v { 1.0 } else { 0.0 }));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub numeric: Vec<f64>,
    pub categorical: Vec<u32>,
}

impl FeatureVector {
    pub fn new(numeric: Vec<f64>, categorical: Vec<u32>) -> Self {
        Self { numeric, categorical }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(u32),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    /// Mondrian lifetime; `None` lets splits continue without bound.
    pub lifetime: Option<f64>,
    /// Fixed discount of the hierarchical class smoothing.
    pub discount: f64,
    /// Regression leaves stay unsplit until they hold this many points.
    pub min_split_points: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: DEFAULT_TREES,
            lifetime: None,
            discount: 0.9,
            min_split_points: 5,
            seed: 0,
        }
    }
}

impl ForestConfig {
    fn validate(&self) -> Result<()> {
        if self.trees == 0 {
            return Err(Error::domain("forest needs at least one tree"));
        }
        if let Some(l) = self.lifetime {
            if !(l > 0.0) {
                return Err(Error::domain("lifetime must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::domain("discount must lie in [0, 1)"));
        }
        if self.min_split_points < 2 {
            return Err(Error::domain("min_split_points must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionPrediction {
    pub mean: f64,
    pub variance: f64,
}

/// Shared storage for training points; leaves index into it.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub(crate) struct PointStore {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MondrianForest {
    version: u32,
    schema: FeatureSchema,
    config: ForestConfig,
    task: Task,
    n_classes: u32,
    points: PointStore,
    trees: Vec<Tree>,
}

fn tree_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl MondrianForest {
    pub fn new(schema: FeatureSchema, task: Task, config: ForestConfig) -> Result<Self> {
        schema.validate()?;
        config.validate()?;
        let trees = (0..config.trees)
            .map(|i| Tree::new(ChaCha8Rng::seed_from_u64(tree_seed(config.seed, i))))
            .collect();
        Ok(Self {
            version: FOREST_FORMAT_VERSION,
            schema,
            config,
            task,
            n_classes: 0,
            points: PointStore::default(),
            trees,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn n_classes(&self) -> u32 {
        self.n_classes
    }

    pub fn n_points(&self) -> usize {
        self.points.y.len()
    }

    pub fn trees(&self) -> usize {
        self.trees.len()
    }

    /// Admits labels `0..n` ahead of training; they start with prior mass only.
    pub fn declare_classes(&mut self, n: u32) -> Result<()> {
        if self.task != Task::Classification {
            return Err(Error::Schema("labels only apply to classification".into()));
        }
        self.n_classes = self.n_classes.max(n);
        Ok(())
    }

    pub fn update(&mut self, x: &FeatureVector, y: Target) -> Result<()> {
        let enc = self.schema.encode(x)?;
        let yv = match (self.task, y) {
            (Task::Classification, Target::Class(c)) => {
                self.n_classes = self.n_classes.max(c + 1);
                c as f64
            }
            (Task::Regression, Target::Value(v)) if v.is_finite() => v,
            (Task::Regression, Target::Value(_)) => return Err(Error::domain("regression target is not finite")),
            _ => return Err(Error::Schema("target kind does not match forest task".into())),
        };
        let ix = self.points.y.len() as u32;
        self.points.x.push(enc);
        self.points.y.push(yv);
        let ctx = tree::Ctx {
            task: self.task,
            lifetime: self.config.lifetime,
            min_split: self.config.min_split_points,
            n_classes: self.n_classes as usize,
        };
        for t in &mut self.trees {
            t.extend(&self.points, ix, &ctx);
        }
        Ok(())
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.points.y.is_empty() {
            Err(Error::Untrained)
        } else {
            Ok(())
        }
    }

    /// Class distribution averaged over trees.
    pub fn predict_proba(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        if self.task != Task::Classification {
            return Err(Error::Schema("forest is not a classifier".into()));
        }
        self.ensure_trained()?;
        let enc = self.schema.encode(x)?;
        let k = self.n_classes as usize;
        let mut out = vec![0.0; k];
        for t in &self.trees {
            for (o, p) in out.iter_mut().zip(t.class_posterior(&enc, k, self.config.discount, self.config.lifetime)) {
                *o += p;
            }
        }
        let n = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }

    /// Most probable class; ties go to the lower label.
    pub fn predict_class(&self, x: &FeatureVector) -> Result<u32> {
        let p = self.predict_proba(x)?;
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        Ok(best as u32)
    }

    /// Mean of leaf means; variance combines spread between trees and within leaves.
    pub fn predict_regression(&self, x: &FeatureVector) -> Result<RegressionPrediction> {
        if self.task != Task::Regression {
            return Err(Error::Schema("forest is not a regressor".into()));
        }
        self.ensure_trained()?;
        let enc = self.schema.encode(x)?;
        let leaves: Vec<(f64, f64)> = self.trees.iter().map(|t| t.leaf_moments(&enc)).collect();
        let n = leaves.len() as f64;
        let mean = leaves.iter().map(|l| l.0).sum::<f64>() / n;
        let between = leaves.iter().map(|l| (l.0 - mean).powi(2)).sum::<f64>() / n;
        let within = leaves.iter().map(|l| l.1).sum::<f64>() / n;
        Ok(RegressionPrediction {
            mean,
            variance: between + within,
        })
    }

    /// Impurity-decrease weighted split counts per original feature, normalized to 1.
    pub fn feature_importance(&self) -> Result<Vec<(String, f64)>> {
        self.ensure_trained()?;
        let owners = self.schema.owners();
        let names = self.schema.feature_names();
        let mut score = vec![0.0; names.len()];
        for t in &self.trees {
            for (dim, gain) in t.split_gains(self.task) {
                score[owners[dim]] += gain.max(0.0);
            }
        }
        let total: f64 = score.iter().sum();
        if total > 0.0 {
            score.iter_mut().for_each(|s| *s /= total);
        } else {
            let u = 1.0 / score.len() as f64;
            score.iter_mut().for_each(|s| *s = u);
        }
        Ok(names.into_iter().map(String::from).zip(score).collect())
    }

    /// Read-only node listing of one tree, for inspection and tests.
    pub fn tree_nodes(&self, tree: usize) -> Vec<NodeView> {
        self.trees[tree].views()
    }

    /// Checks τ ordering, stored statistics and that every node box holds
    /// the points routed through it.
    pub fn check_invariants(&self) -> Result<()> {
        for (i, t) in self.trees.iter().enumerate() {
            t.check(&self.points, self.task, self.n_classes as usize)
                .map_err(|e| Error::Invariant(format!("tree {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        if f.version != FOREST_FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported forest format version {}", f.version)));
        }
        f.schema.validate()?;
        f.config.validate()?;
        Ok(f)
    }
}
