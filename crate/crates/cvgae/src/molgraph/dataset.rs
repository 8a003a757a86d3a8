//! Dataset assembly: ingestion filters, corpus-derived vocabulary,
//! featurization, splits, and the versioned on-disk bundle.

use super::{
    featurize, filter_molecule, parse_sdf, Conformation, FilterProfile, GraphFeatures,
    MolecularGraph, RecordReject, Vocabulary,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;

const FORMAT: &str = "cvgae-dataset";
const VERSION: u32 = 1;

#[derive(Debug)]
pub enum DatasetError {
    Io(std::io::Error),
    Format(String),
    SplitTooLarge { requested: usize, available: usize },
    NoAcceptedRecords,
    UnknownSplit(String),
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::Io(e) => write!(f, "dataset i/o error: {}", e),
            DatasetError::Format(msg) => write!(f, "dataset format error: {}", msg),
            DatasetError::SplitTooLarge { requested, available } => write!(
                f,
                "split sizes request {} entries but only {} exist",
                requested, available
            ),
            DatasetError::NoAcceptedRecords => write!(f, "no records passed ingestion"),
            DatasetError::UnknownSplit(s) => write!(f, "unknown split `{}`", s),
        }
    }
}

impl std::error::Error for DatasetError {}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for SplitKind {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, DatasetError> {
        match s {
            "train" => Ok(SplitKind::Train),
            "valid" | "validation" => Ok(SplitKind::Valid),
            "test" => Ok(SplitKind::Test),
            other => Err(DatasetError::UnknownSplit(other.to_string())),
        }
    }
}

/// Disjoint index sets over `0..n`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Uniform random disjoint validation/test selection; the remainder is
/// train. Deterministic under `seed`.
pub fn split_indices(
    n: usize,
    n_valid: usize,
    n_test: usize,
    seed: u64,
) -> Result<Splits, DatasetError> {
    if n_valid + n_test > n {
        return Err(DatasetError::SplitTooLarge { requested: n_valid + n_test, available: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut valid: Vec<usize> = order[..n_valid].to_vec();
    let mut test: Vec<usize> = order[n_valid..n_valid + n_test].to_vec();
    let mut train: Vec<usize> = order[n_valid + n_test..].to_vec();
    valid.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Splits { train, valid, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub title: String,
    pub graph: MolecularGraph,
    pub features: GraphFeatures,
    pub conformation: Conformation,
}

/// Featurized corpus plus vocabulary and split assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub entries: Vec<DatasetEntry>,
    pub splits: Splits,
}

/// Result of running SDF text through the admission pipeline.
pub struct IngestOutcome {
    pub dataset: Dataset,
    /// `(source name, reject)` for every skipped record.
    pub rejects: Vec<(String, RecordReject)>,
}

impl Dataset {
    /// Parse, filter, and featurize a set of named SDF texts. The element
    /// vocabulary is derived from the accepted records and persisted with
    /// the dataset. Splits start empty (everything is train).
    pub fn ingest(
        sources: &[(String, String)],
        profile: &FilterProfile,
    ) -> Result<IngestOutcome, DatasetError> {
        let mut accepted: Vec<(String, MolecularGraph, Conformation)> = Vec::new();
        let mut rejects = Vec::new();
        for (name, text) in sources {
            let parsed = parse_sdf(text);
            for reject in parsed.rejects {
                rejects.push((name.clone(), reject));
            }
            for record in parsed.records {
                match filter_molecule(&record.graph, profile) {
                    Ok(()) => accepted.push((record.title, record.graph, record.conformation)),
                    Err(reason) => rejects.push((
                        name.clone(),
                        RecordReject { index: usize::MAX, title: record.title, reason },
                    )),
                }
            }
        }
        if accepted.is_empty() {
            return Err(DatasetError::NoAcceptedRecords);
        }

        let vocab = Vocabulary::from_graphs(accepted.iter().map(|(_, g, _)| g));
        let mut entries = Vec::with_capacity(accepted.len());
        for (k, (title, graph, conformation)) in accepted.into_iter().enumerate() {
            let features = featurize(&graph, &vocab)
                .map_err(|e| DatasetError::Format(format!("featurize `{}`: {}", title, e)))?;
            entries.push(DatasetEntry {
                id: format!("m{:05}", k),
                title,
                graph,
                features,
                conformation,
            });
        }
        let n = entries.len();
        let dataset = Dataset {
            vocab,
            entries,
            splits: Splits { train: (0..n).collect(), valid: Vec::new(), test: Vec::new() },
        };
        Ok(IngestOutcome { dataset, rejects })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn assign_splits(&mut self, n_valid: usize, n_test: usize, seed: u64) -> Result<(), DatasetError> {
        self.splits = split_indices(self.entries.len(), n_valid, n_test, seed)?;
        Ok(())
    }

    pub fn split(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.splits.train,
            SplitKind::Valid => &self.splits.valid,
            SplitKind::Test => &self.splits.test,
        }
    }

    pub fn entry_by_id(&self, id: &str) -> Option<&DatasetEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    fn canonical_json(&self) -> Result<String, DatasetError> {
        let file = BundleFile {
            format: FORMAT.to_string(),
            version: VERSION,
            vocab: self.vocab.clone(),
            entries: self.entries.clone(),
            splits: self.splits.clone(),
        };
        serde_json::to_string(&file).map_err(|e| DatasetError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.canonical_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let bytes = std::fs::read(path)?;
        let file: BundleFile =
            serde_json::from_slice(&bytes).map_err(|e| DatasetError::Format(e.to_string()))?;
        if file.format != FORMAT {
            return Err(DatasetError::Format(format!(
                "expected format `{}`, found `{}`",
                FORMAT, file.format
            )));
        }
        if file.version != VERSION {
            return Err(DatasetError::Format(format!(
                "unsupported version {} (expected {})",
                file.version, VERSION
            )));
        }
        let dataset = Dataset { vocab: file.vocab, entries: file.entries, splits: file.splits };
        dataset.validate()?;
        Ok(dataset)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let n = self.entries.len();
        let mut seen = vec![false; n];
        for &idx in self
            .splits
            .train
            .iter()
            .chain(&self.splits.valid)
            .chain(&self.splits.test)
        {
            if idx >= n {
                return Err(DatasetError::Format(format!("split index {} out of {}", idx, n)));
            }
            if seen[idx] {
                return Err(DatasetError::Format(format!("split index {} repeated", idx)));
            }
            seen[idx] = true;
        }
        for entry in &self.entries {
            entry
                .features
                .node
                .validate()
                .and_then(|_| entry.features.edge.validate())
                .map_err(|e| DatasetError::Format(format!("entry `{}`: {}", entry.id, e)))?;
            if entry.graph.atom_count() != entry.conformation.len() {
                return Err(DatasetError::Format(format!(
                    "entry `{}`: {} atoms vs {} coordinates",
                    entry.id,
                    entry.graph.atom_count(),
                    entry.conformation.len()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the serialized bundle; used in run manifests.
    pub fn fingerprint(&self) -> Result<String, DatasetError> {
        let json = self.canonical_json()?;
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }
}

#[derive(Serialize, Deserialize)]
struct BundleFile {
    format: String,
    version: u32,
    vocab: Vocabulary,
    entries: Vec<DatasetEntry>,
    splits: Splits,
}
