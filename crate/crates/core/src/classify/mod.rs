//! Classifiers: random forest (primary), kNN, multinomial logistic regression and
//! shrinkage LDA, plus an exhaustive grid search scored by cross-validated AUC.

pub mod forest;
pub mod linear;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluate::{auc_from_proba, FoldPlan};
use crate::features::FeatureMatrix;
use crate::{Error, Result};

pub use forest::Forest;
pub use linear::{Lda, Logistic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    RandomForest,
    Knn,
    Logistic,
    Lda,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::RandomForest => "random_forest",
            ClassifierKind::Knn => "knn",
            ClassifierKind::Logistic => "logistic",
            ClassifierKind::Lda => "lda",
        }
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_forest" | "rf" => Ok(ClassifierKind::RandomForest),
            "knn" => Ok(ClassifierKind::Knn),
            "logistic" | "lr" => Ok(ClassifierKind::Logistic),
            "lda" => Ok(ClassifierKind::Lda),
            other => Err(Error::InvalidConfig(format!("unknown classifier '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierParams {
    pub n_estimators: usize,
    /// None grows trees until leaves are pure.
    pub max_depth: Option<usize>,
    pub k: usize,
    pub l2: f64,
    pub shrinkage: f64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams { n_estimators: 100, max_depth: None, k: 5, l2: 1e-3, shrinkage: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    #[serde(default)]
    pub params: ClassifierParams,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ClassifierSpec {
    pub fn random_forest(n_estimators: usize, max_depth: Option<usize>, seed: u64) -> Self {
        ClassifierSpec {
            kind: ClassifierKind::RandomForest,
            params: ClassifierParams { n_estimators, max_depth, ..Default::default() },
            seed: Some(seed),
        }
    }

    pub fn of_kind(kind: ClassifierKind, seed: u64) -> Self {
        ClassifierSpec { kind, params: ClassifierParams::default(), seed: Some(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        match self.kind {
            ClassifierKind::RandomForest => {
                if self.seed.is_none() {
                    return Err(Error::InvalidConfig("random forest requires a seed".into()));
                }
                if p.n_estimators == 0 {
                    return Err(Error::InvalidConfig("n_estimators must be at least 1".into()));
                }
                if p.max_depth == Some(0) {
                    return Err(Error::InvalidConfig("max_depth must be at least 1".into()));
                }
            }
            ClassifierKind::Knn if p.k == 0 => {
                return Err(Error::InvalidConfig("k must be at least 1".into()));
            }
            ClassifierKind::Logistic if !(p.l2.is_finite() && p.l2 >= 0.0) => {
                return Err(Error::InvalidConfig(format!("invalid l2 penalty {}", p.l2)));
            }
            ClassifierKind::Lda if !(p.shrinkage.is_finite() && p.shrinkage >= 0.0) => {
                return Err(Error::InvalidConfig(format!("invalid shrinkage {}", p.shrinkage)));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let p = &self.params;
        match self.kind {
            ClassifierKind::RandomForest => {
                let depth = p.max_depth.map_or("none".to_string(), |d| d.to_string());
                format!("random_forest(trees={}, depth={depth})", p.n_estimators)
            }
            ClassifierKind::Knn => format!("knn(k={})", p.k),
            ClassifierKind::Logistic => format!("logistic(l2={})", p.l2),
            ClassifierKind::Lda => format!("lda(shrinkage={})", p.shrinkage),
        }
    }
}

/// n_estimators in {100, 300} x max_depth in {4, 8, unlimited}.
pub fn default_grid(seed: u64) -> Vec<ClassifierSpec> {
    let mut grid = Vec::new();
    for n in [100, 300] {
        for d in [Some(4), Some(8), None] {
            grid.push(ClassifierSpec::random_forest(n, d, seed));
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Learned {
    RandomForest(Forest),
    Knn { x: Array2<f64>, y: Vec<usize>, k: usize },
    Logistic(Logistic),
    Lda(Lda),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ClassifierSpec,
    /// Original label values; probability columns follow this order.
    pub classes: Vec<usize>,
    pub schema: Vec<String>,
    pub learned: Learned,
}

impl TrainedModel {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn predict_proba_row(&self, x: ArrayView1<f64>) -> Vec<f64> {
        match &self.learned {
            Learned::RandomForest(f) => f.predict_proba_row(x),
            Learned::Knn { x: train, y, k } => knn_vote(train.view(), y, *k, self.classes.len(), x),
            Learned::Logistic(m) => m.predict_proba_row(x),
            Learned::Lda(m) => m.predict_proba_row(x),
        }
    }
}

fn knn_vote(train: ArrayView2<f64>, y: &[usize], k: usize, n_classes: usize, x: ArrayView1<f64>) -> Vec<f64> {
    let mut d: Vec<(f64, usize)> = train
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = k.min(d.len());
    let mut p = vec![0.0; n_classes];
    for &(_, i) in &d[..k] {
        p[y[i]] += 1.0 / k as f64;
    }
    p
}

/// Maps labels to dense class indices and checks the minimum class sizes.
pub fn encode_labels(y: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::MissingClass(format!("training labels contain {} class(es), need at least 2", classes.len())));
    }
    let idx: Vec<usize> = y.iter().map(|v| classes.binary_search(v).unwrap()).collect();
    for (c, &label) in classes.iter().enumerate() {
        let n = idx.iter().filter(|&&i| i == c).count();
        if n < 2 {
            return Err(Error::InvalidInput(format!("class {label} has {n} sample(s), need at least 2")));
        }
    }
    Ok((classes, idx))
}

pub fn train(spec: &ClassifierSpec, x: &FeatureMatrix, y: &[usize]) -> Result<TrainedModel> {
    spec.validate()?;
    if x.n_rows() != y.len() {
        return Err(Error::InvalidInput(format!("{} feature rows but {} labels", x.n_rows(), y.len())));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("feature matrix contains non-finite values".into()));
    }
    let (classes, yi) = encode_labels(y)?;
    let k = classes.len();
    let p = &spec.params;
    let learned = match spec.kind {
        ClassifierKind::RandomForest => {
            Learned::RandomForest(forest::fit(x.data.view(), &yi, k, p.n_estimators, p.max_depth, spec.seed.unwrap_or(0)))
        }
        ClassifierKind::Knn => Learned::Knn { x: x.data.clone(), y: yi, k: p.k },
        ClassifierKind::Logistic => Learned::Logistic(linear::fit_logistic(x.data.view(), &yi, k, p.l2)?),
        ClassifierKind::Lda => Learned::Lda(linear::fit_lda(x.data.view(), &yi, k, p.shrinkage)?),
    };
    Ok(TrainedModel { spec: spec.clone(), classes, schema: x.schema.clone(), learned })
}

pub fn predict_proba(model: &TrainedModel, x: &FeatureMatrix) -> Result<Array2<f64>> {
    if x.n_features() != model.schema.len() {
        return Err(Error::SchemaMismatch { expected: model.schema.len(), got: x.n_features() });
    }
    if x.schema != model.schema {
        let at = x.schema.iter().zip(&model.schema).position(|(a, b)| a != b).unwrap_or(0);
        return Err(Error::InvalidInput(format!(
            "feature schema differs from the model's at column {at}: '{}' vs '{}'",
            x.schema[at], model.schema[at]
        )));
    }
    let rows: Vec<Vec<f64>> = x.data.rows().into_iter().collect::<Vec<_>>().into_par_iter().map(|r| model.predict_proba_row(r)).collect();
    let k = model.n_classes();
    let mut out = Array2::zeros((rows.len(), k));
    for (i, r) in rows.iter().enumerate() {
        for c in 0..k {
            out[[i, c]] = r[c];
        }
    }
    Ok(out)
}

/// Fits on the training rows and scores the test rows by AUC.
pub fn fit_score(spec: &ClassifierSpec, x: &FeatureMatrix, y: &[usize], train_rows: &[usize], test_rows: &[usize]) -> Result<f64> {
    let ytr: Vec<usize> = train_rows.iter().map(|&i| y[i]).collect();
    let yte: Vec<usize> = test_rows.iter().map(|&i| y[i]).collect();
    let model = train(spec, &x.select_rows(train_rows), &ytr)?;
    let proba = predict_proba(&model, &x.select_rows(test_rows))?;
    auc_from_proba(proba.view(), &model.classes, &yte)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub spec: ClassifierSpec,
    /// None marks a skipped fold.
    pub fold_aucs: Vec<Option<f64>>,
    pub mean_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: ClassifierSpec,
    pub best_index: usize,
    pub table: Vec<GridRow>,
}

/// `runs[i]` is the run index of row i; folds refer to run indices.
pub fn grid_search(grid: &[ClassifierSpec], x: &FeatureMatrix, y: &[usize], runs: &[usize], cv: &FoldPlan) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty hyperparameter grid".into()));
    }
    if runs.len() != y.len() || x.n_rows() != y.len() {
        return Err(Error::InvalidInput("rows, labels and run indices differ in length".into()));
    }
    let mut usable = Vec::new();
    for (fi, fold) in cv.folds.iter().enumerate() {
        let train_rows: Vec<usize> = (0..y.len()).filter(|&i| fold.train.contains(&runs[i])).collect();
        let test_rows: Vec<usize> = (0..y.len()).filter(|&i| runs[i] == fold.test).collect();
        let ok_train = encode_labels(&train_rows.iter().map(|&i| y[i]).collect::<Vec<_>>()).is_ok();
        let mut test_classes: Vec<usize> = test_rows.iter().map(|&i| y[i]).collect();
        test_classes.sort_unstable();
        test_classes.dedup();
        if !ok_train || test_classes.len() < 2 {
            log::warn!("grid search: fold {fi} (test run {}) skipped, a class is missing", fold.test);
            usable.push(None);
        } else {
            usable.push(Some((train_rows, test_rows)));
        }
    }
    if usable.iter().all(Option::is_none) {
        return Err(Error::MissingClass("every cross-validation fold lacks a class".into()));
    }
    let table: Vec<GridRow> = grid
        .par_iter()
        .map(|spec| -> Result<GridRow> {
            let mut fold_aucs = Vec::with_capacity(usable.len());
            for u in &usable {
                fold_aucs.push(match u {
                    None => None,
                    Some((tr, te)) => Some(fit_score(spec, x, y, tr, te).map_err(|e| e.context(spec.describe()))?),
                });
            }
            let vals: Vec<f64> = fold_aucs.iter().flatten().copied().collect();
            let mean_auc = vals.iter().sum::<f64>() / vals.len() as f64;
            Ok(GridRow { spec: spec.clone(), fold_aucs, mean_auc })
        })
        .collect::<Result<_>>()?;
    let depth_key = |s: &ClassifierSpec| s.params.max_depth.unwrap_or(usize::MAX);
    let mut best_index = 0;
    for (i, row) in table.iter().enumerate().skip(1) {
        let b = &table[best_index];
        let better = row.mean_auc > b.mean_auc
            || (row.mean_auc == b.mean_auc
                && (depth_key(&row.spec), row.spec.params.n_estimators) < (depth_key(&b.spec), b.spec.params.n_estimators));
        if better {
            best_index = i;
        }
    }
    Ok(GridResult { best: table[best_index].spec.clone(), best_index, table })
}
