// On-disk dataset directory: COCO-style annotations for the train and val
// scenes, one feature sidecar covering both, and the ID:OOD split.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thpn::anchors::AnchorGrid;
use thpn::dataset::{
    load_annotations, load_features, load_split, save_annotations, save_features, save_split,
    Dataset, FeatureStore, SplitConfig, SyntheticData,
};

use crate::args::DataArgs;
use crate::error::{CliError, Context};

pub const TRAIN_FILE: &str = "train.json";
pub const VAL_FILE: &str = "val.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const SPLIT_FILE: &str = "split.json";

pub struct DataDir {
    pub dir: PathBuf,
    pub split_path: PathBuf,
    pub train: Dataset,
    /// Absent when the directory has no `val.json`.
    pub val: Option<Dataset>,
    pub features: FeatureStore,
    pub split: SplitConfig,
    pub grid: AnchorGrid,
}

impl DataDir {
    pub fn load(args: &DataArgs) -> Result<Self, CliError> {
        let dir = args.data.clone();
        let split_path = args.split.clone().unwrap_or_else(|| dir.join(SPLIT_FILE));
        let train = load_annotations(dir.join(TRAIN_FILE)).context("loading training scenes")?;
        let val_path = dir.join(VAL_FILE);
        let val = if val_path.exists() {
            Some(load_annotations(&val_path).context("loading validation scenes")?)
        } else {
            None
        };
        let features = load_features(dir.join(FEATURES_FILE)).context("loading features")?;
        let split = load_split(&split_path).context("loading split")?;
        let grid = features.grid.grid().context("feature grid")?;
        Ok(DataDir {
            dir,
            split_path,
            train,
            val,
            features,
            split,
            grid,
        })
    }

    pub fn val(&self) -> Result<&Dataset, CliError> {
        self.val.as_ref().ok_or_else(|| {
            CliError::Config(format!("{} has no {VAL_FILE}", self.dir.display()))
        })
    }
}

/// Write a synthetic dataset; returns the files by role.
pub fn write_synthetic(data: &SyntheticData, dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(dir.display(), e))?;
    let files: BTreeMap<String, PathBuf> = [
        ("train", TRAIN_FILE),
        ("val", VAL_FILE),
        ("features", FEATURES_FILE),
        ("split", SPLIT_FILE),
    ]
    .into_iter()
    .map(|(k, f)| (k.to_string(), dir.join(f)))
    .collect();
    save_annotations(&data.train, &files["train"]).context("writing training scenes")?;
    save_annotations(&data.val, &files["val"]).context("writing validation scenes")?;
    save_features(&data.features, &files["features"]).context("writing features")?;
    save_split(&data.split, &files["split"]).context("writing split")?;
    Ok(files)
}
