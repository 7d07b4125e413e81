use std::fmt;

use crate::error::{Error, Result};

/// The fifteen ChestX-ray14 label classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Finding {
    NoFinding,
    Atelectasis,
    Cardiomegaly,
    Consolidation,
    Edema,
    Effusion,
    Emphysema,
    Fibrosis,
    Hernia,
    Infiltration,
    Mass,
    Nodule,
    PleuralThickening,
    Pneumonia,
    Pneumothorax,
}

impl Finding {
    pub const ALL: [Finding; 15] = [
        Finding::NoFinding,
        Finding::Atelectasis,
        Finding::Cardiomegaly,
        Finding::Consolidation,
        Finding::Edema,
        Finding::Effusion,
        Finding::Emphysema,
        Finding::Fibrosis,
        Finding::Hernia,
        Finding::Infiltration,
        Finding::Mass,
        Finding::Nodule,
        Finding::PleuralThickening,
        Finding::Pneumonia,
        Finding::Pneumothorax,
    ];

    /// Spelling used in the dataset's metadata files.
    pub fn label(self) -> &'static str {
        match self {
            Finding::NoFinding => "No Finding",
            Finding::Atelectasis => "Atelectasis",
            Finding::Cardiomegaly => "Cardiomegaly",
            Finding::Consolidation => "Consolidation",
            Finding::Edema => "Edema",
            Finding::Effusion => "Effusion",
            Finding::Emphysema => "Emphysema",
            Finding::Fibrosis => "Fibrosis",
            Finding::Hernia => "Hernia",
            Finding::Infiltration => "Infiltration",
            Finding::Mass => "Mass",
            Finding::Nodule => "Nodule",
            Finding::PleuralThickening => "Pleural_Thickening",
            Finding::Pneumonia => "Pneumonia",
            Finding::Pneumothorax => "Pneumothorax",
        }
    }

    /// Lowercase prompt token.
    pub fn token(self) -> &'static str {
        match self {
            Finding::NoFinding => "no finding",
            Finding::Atelectasis => "atelectasis",
            Finding::Cardiomegaly => "cardiomegaly",
            Finding::Consolidation => "consolidation",
            Finding::Edema => "edema",
            Finding::Effusion => "effusion",
            Finding::Emphysema => "emphysema",
            Finding::Fibrosis => "fibrosis",
            Finding::Hernia => "hernia",
            Finding::Infiltration => "infiltration",
            Finding::Mass => "mass",
            Finding::Nodule => "nodule",
            Finding::PleuralThickening => "pleural thickening",
            Finding::Pneumonia => "pneumonia",
            Finding::Pneumothorax => "pneumothorax",
        }
    }

    /// Parses a dataset label. Accepts underscores for spaces and the
    /// bounding-box file's "Infiltrate" spelling.
    pub fn from_label(label: &str) -> Option<Finding> {
        let norm = label.trim().replace('_', " ").to_lowercase();
        if norm == "infiltrate" {
            return Some(Finding::Infiltration);
        }
        Self::from_token(&norm)
    }

    pub fn from_token(token: &str) -> Option<Finding> {
        Finding::ALL.into_iter().find(|f| f.token() == token)
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Cell of the 3×3 grid over the image plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position {
    pub row: usize,
    pub col: usize,
}

impl Position {
    pub fn all() -> impl Iterator<Item = Position> {
        (0..3).flat_map(|row| (0..3).map(move |col| Position { row, col }))
    }

    pub fn token(self) -> &'static str {
        const TOKENS: [[&str; 3]; 3] = [
            ["top left", "top center", "top right"],
            ["middle left", "center", "middle right"],
            ["bottom left", "bottom center", "bottom right"],
        ];
        TOKENS[self.row][self.col]
    }

    pub fn from_token(token: &str) -> Option<Position> {
        Position::all().find(|p| p.token() == token)
    }
}

pub const NULL_TOKEN: &str = "<null>";

/// Ordered conditioning vocabulary: findings, then positions, then the null
/// token used for empty prompts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let tokens = Finding::ALL
            .iter()
            .map(|f| f.token().to_string())
            .chain(Position::all().map(|p| p.token().to_string()))
            .chain(std::iter::once(NULL_TOKEN.to_string()))
            .collect();
        Self { tokens }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token_id(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| Error::UnknownToken {
                token: token.to_string(),
                vocabulary: self.tokens.clone(),
            })
    }

    /// Token ids for a prompt; the empty prompt maps to the null token.
    pub fn encode(&self, prompt: &Prompt) -> Result<Vec<usize>> {
        if prompt.tokens.is_empty() {
            return Ok(vec![self.token_id(NULL_TOKEN)?]);
        }
        prompt.tokens.iter().map(|t| self.token_id(t)).collect()
    }
}

/// Ordered conditioning tokens for one image.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Prompt {
    tokens: Vec<String>,
}

impl Prompt {
    pub fn new(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    /// Parses comma-separated text such as `"edema, top left"`.
    pub fn parse(text: &str) -> Prompt {
        let tokens = text
            .split(',')
            .map(|t| t.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        Prompt { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn findings(&self) -> Vec<Finding> {
        self.tokens.iter().filter_map(|t| Finding::from_token(t)).collect()
    }

    pub fn position(&self) -> Option<Position> {
        self.tokens.iter().find_map(|t| Position::from_token(t))
    }

    /// Tokens joined by `_`, with spaces inside tokens replaced by `-`.
    pub fn file_stem(&self) -> String {
        self.tokens
            .iter()
            .map(|t| t.replace(' ', "-"))
            .collect::<Vec<_>>()
            .join("_")
    }

    /// Inverse of [`Prompt::file_stem`].
    pub fn from_file_stem(stem: &str) -> Prompt {
        let tokens = stem
            .split('_')
            .filter(|t| !t.is_empty())
            .map(|t| t.replace('-', " "))
            .collect();
        Prompt { tokens }
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(", "))
    }
}

/// Canonical prompt: finding tokens sorted lexicographically, then the
/// position token if any.
pub fn prompt_from_findings(findings: &[Finding], position: Option<Position>) -> Result<Prompt> {
    validate_findings(findings).map_err(|m| Error::data("prompt", m))?;
    let mut tokens: Vec<String> = findings.iter().map(|f| f.token().to_string()).collect();
    tokens.sort();
    tokens.dedup();
    if let Some(p) = position {
        tokens.push(p.token().to_string());
    }
    Ok(Prompt { tokens })
}

pub(crate) fn validate_findings(findings: &[Finding]) -> std::result::Result<(), String> {
    if findings.is_empty() {
        return Err("no findings".into());
    }
    if findings.contains(&Finding::NoFinding) && findings.len() > 1 {
        return Err("\"No Finding\" combined with other findings".into());
    }
    Ok(())
}
