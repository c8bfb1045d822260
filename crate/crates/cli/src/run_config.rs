//! Flat `key=value` run configuration: model, training, split, paths.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use m3net::config::take;
use m3net::data::{DatasetCard, RawSeries};
use m3net::{Error, ModelConfig, Result, SplitSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub dataset: Option<PathBuf>,
    /// Builtin card name (`PEMS08`), path to a card file, or `none`.
    pub dataset_card: String,
    pub out: PathBuf,
    /// 0 uses every available core.
    pub device_threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            dataset: None,
            dataset_card: "none".into(),
            out: PathBuf::from("runs/latest"),
            device_threads: 0,
        }
    }
}

const RUN_KEYS: [&str; 7] = [
    "train_frac",
    "val_frac",
    "test_frac",
    "dataset",
    "dataset_card",
    "out",
    "device_threads",
];

/// Keys the data determines unless the config pins them.
const DATA_KEYS: [&str; 3] = ["nodes", "channels", "steps_per_day"];

impl RunConfig {
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e = self.model.entries();
        e.extend(self.train.entries());
        let dataset = self
            .dataset
            .as_ref()
            .map_or(String::new(), |p| p.display().to_string());
        e.extend(
            [
                ("train_frac", format!("{:?}", self.split.train)),
                ("val_frac", format!("{:?}", self.split.val)),
                ("test_frac", format!("{:?}", self.split.test)),
                ("dataset", dataset),
                ("dataset_card", self.dataset_card.clone()),
                ("out", self.out.display().to_string()),
                ("device_threads", self.device_threads.to_string()),
            ]
            .map(|(k, v)| (k.to_string(), v)),
        );
        e
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    fn known_keys() -> BTreeSet<String> {
        let mut keys: BTreeSet<String> = Self::default().entries().into_iter().map(|(k, _)| k).collect();
        keys.extend(RUN_KEYS.iter().map(|k| k.to_string()));
        keys
    }

    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        let known = Self::known_keys();
        if let Some(bad) = map.keys().find(|k| !known.contains(*k)) {
            return Err(Error::Config(format!("unknown key `{bad}`")));
        }
        self.model.apply(map)?;
        self.train.apply(map)?;
        take(map, "train_frac", &mut self.split.train)?;
        take(map, "val_frac", &mut self.split.val)?;
        take(map, "test_frac", &mut self.split.test)?;
        take(map, "dataset_card", &mut self.dataset_card)?;
        take(map, "device_threads", &mut self.device_threads)?;
        if let Some(d) = map.get("dataset") {
            self.dataset = (!d.is_empty()).then(|| PathBuf::from(d));
        }
        if let Some(o) = map.get("out") {
            self.out = PathBuf::from(o);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()
    }

    pub fn card(&self) -> Result<Option<DatasetCard>> {
        match self.dataset_card.as_str() {
            "" | "none" => Ok(None),
            name => match DatasetCard::builtin(name) {
                Some(card) => Ok(Some(card)),
                None => {
                    let text = std::fs::read_to_string(name).map_err(|e| {
                        Error::Load(format!("dataset card `{name}` is neither builtin nor readable: {e}"))
                    })?;
                    DatasetCard::from_text(&text).map(Some)
                }
            },
        }
    }

    /// Opens the dataset, checks it against the card and fills in the
    /// data-determined model fields. `pinned` holds keys the user set
    /// explicitly; those must agree with the data.
    pub fn load_dataset(&mut self, pinned: &BTreeSet<String>) -> Result<RawSeries> {
        let path = self
            .dataset
            .clone()
            .ok_or_else(|| Error::Config("no dataset given (use --dataset)".into()))?;
        let series = RawSeries::open(&path)?;
        if let Some(card) = self.card()? {
            series.check_card(&card)?;
        }
        let found = [series.nodes(), series.channels(), series.steps_per_day()];
        let slots = [
            &mut self.model.nodes,
            &mut self.model.channels,
            &mut self.model.steps_per_day,
        ];
        for ((key, slot), value) in DATA_KEYS.iter().zip(slots).zip(found) {
            if pinned.contains(*key) && *slot != value {
                return Err(Error::Config(format!(
                    "config sets {key}={slot} but {} has {value}",
                    path.display()
                )));
            }
            *slot = value;
        }
        Ok(series)
    }

    /// Writes `run.cfg` into the output directory.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("run.cfg");
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }
}
