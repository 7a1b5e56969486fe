//! Clarity and evasion label vocabularies and the evasion → clarity hierarchy.
//!
//! Every evasion technique belongs to exactly one clarity level:
//!
//! | Clarity         | Evasion techniques                                          |
//! |-----------------|-------------------------------------------------------------|
//! | Clear Reply     | Explicit                                                    |
//! | Ambivalent      | Implicit, Dodging, General, Deflection, Partial/half-answer |
//! | Clear Non-Reply | Declining to answer, Claims ignorance, Clarification        |
//!
//! Display strings are the on-disk vocabulary shared by every file format in
//! the crate. Parsing is case-insensitive, ignores surrounding whitespace, and
//! also accepts the short symbolic names (`Partial`, `Declining`, ...).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error("unknown {family} label: {label:?}")]
    UnknownLabel { family: LabelFamily, label: String },
}

/// Which of the two label vocabularies a label (or prediction) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFamily {
    Clarity,
    Evasion,
}

impl LabelFamily {
    pub fn num_labels(self) -> usize {
        match self {
            LabelFamily::Clarity => ClarityLabel::ALL.len(),
            LabelFamily::Evasion => EvasionLabel::ALL.len(),
        }
    }

    /// All labels of the family in taxonomy order.
    pub fn labels(self) -> Vec<Label> {
        match self {
            LabelFamily::Clarity => ClarityLabel::ALL.iter().map(|&c| Label::Clarity(c)).collect(),
            LabelFamily::Evasion => EvasionLabel::ALL.iter().map(|&e| Label::Evasion(e)).collect(),
        }
    }

    pub fn parse_label(self, s: &str) -> Result<Label, TaxonomyError> {
        parse_label(s, self)
    }
}

impl fmt::Display for LabelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelFamily::Clarity => "clarity",
            LabelFamily::Evasion => "evasion",
        })
    }
}

impl FromStr for LabelFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clarity" => Ok(LabelFamily::Clarity),
            "evasion" => Ok(LabelFamily::Evasion),
            other => Err(format!("unknown label family {other:?}")),
        }
    }
}

/// Three-way clarity level of an answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClarityLabel {
    ClearReply,
    Ambivalent,
    ClearNonReply,
}

impl ClarityLabel {
    pub const ALL: [ClarityLabel; 3] = [
        ClarityLabel::ClearReply,
        ClarityLabel::Ambivalent,
        ClarityLabel::ClearNonReply,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            ClarityLabel::ClearReply => "Clear Reply",
            ClarityLabel::Ambivalent => "Ambivalent",
            ClarityLabel::ClearNonReply => "Clear Non-Reply",
        }
    }

    fn aliases(self) -> &'static [&'static str] {
        match self {
            ClarityLabel::ClearReply => &["ClearReply"],
            ClarityLabel::Ambivalent => &["Ambivalent Reply"],
            ClarityLabel::ClearNonReply => &["ClearNonReply"],
        }
    }

    /// Position in taxonomy order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// The evasion techniques that map to this clarity level.
    pub fn evasions(self) -> &'static [EvasionLabel] {
        use EvasionLabel::*;
        match self {
            ClarityLabel::ClearReply => &[Explicit],
            ClarityLabel::Ambivalent => &[Implicit, Dodging, General, Deflection, Partial],
            ClarityLabel::ClearNonReply => &[Declining, Ignorance, Clarification],
        }
    }
}

/// Nine-way evasion technique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EvasionLabel {
    Explicit,
    Implicit,
    Dodging,
    General,
    Deflection,
    Partial,
    Declining,
    Ignorance,
    Clarification,
}

impl EvasionLabel {
    pub const ALL: [EvasionLabel; 9] = [
        EvasionLabel::Explicit,
        EvasionLabel::Implicit,
        EvasionLabel::Dodging,
        EvasionLabel::General,
        EvasionLabel::Deflection,
        EvasionLabel::Partial,
        EvasionLabel::Declining,
        EvasionLabel::Ignorance,
        EvasionLabel::Clarification,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            EvasionLabel::Explicit => "Explicit",
            EvasionLabel::Implicit => "Implicit",
            EvasionLabel::Dodging => "Dodging",
            EvasionLabel::General => "General",
            EvasionLabel::Deflection => "Deflection",
            EvasionLabel::Partial => "Partial/half-answer",
            EvasionLabel::Declining => "Declining to answer",
            EvasionLabel::Ignorance => "Claims ignorance",
            EvasionLabel::Clarification => "Clarification",
        }
    }

    fn aliases(self) -> &'static [&'static str] {
        match self {
            EvasionLabel::Partial => &["Partial"],
            EvasionLabel::Declining => &["Declining"],
            EvasionLabel::Ignorance => &["Ignorance"],
            _ => &[],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Clarity parent of this technique.
    pub fn clarity(self) -> ClarityLabel {
        use EvasionLabel::*;
        match self {
            Explicit => ClarityLabel::ClearReply,
            Implicit | Dodging | General | Deflection | Partial => ClarityLabel::Ambivalent,
            Declining | Ignorance | Clarification => ClarityLabel::ClearNonReply,
        }
    }
}

pub fn clarity_of(e: EvasionLabel) -> ClarityLabel {
    e.clarity()
}

pub fn evasions_of(c: ClarityLabel) -> &'static [EvasionLabel] {
    c.evasions()
}

fn matches_name(input: &str, name: &str) -> bool {
    input.eq_ignore_ascii_case(name)
}

pub fn parse_clarity(s: &str) -> Result<ClarityLabel, TaxonomyError> {
    let t = s.trim();
    ClarityLabel::ALL
        .iter()
        .copied()
        .find(|c| matches_name(t, c.display_name()) || c.aliases().iter().any(|a| matches_name(t, a)))
        .ok_or_else(|| TaxonomyError::UnknownLabel {
            family: LabelFamily::Clarity,
            label: s.to_string(),
        })
}

pub fn parse_evasion(s: &str) -> Result<EvasionLabel, TaxonomyError> {
    let t = s.trim();
    EvasionLabel::ALL
        .iter()
        .copied()
        .find(|e| matches_name(t, e.display_name()) || e.aliases().iter().any(|a| matches_name(t, a)))
        .ok_or_else(|| TaxonomyError::UnknownLabel {
            family: LabelFamily::Evasion,
            label: s.to_string(),
        })
}

pub fn parse_label(s: &str, family: LabelFamily) -> Result<Label, TaxonomyError> {
    match family {
        LabelFamily::Clarity => parse_clarity(s).map(Label::Clarity),
        LabelFamily::Evasion => parse_evasion(s).map(Label::Evasion),
    }
}

/// A label from either family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Clarity(ClarityLabel),
    Evasion(EvasionLabel),
}

impl Label {
    pub fn family(self) -> LabelFamily {
        match self {
            Label::Clarity(_) => LabelFamily::Clarity,
            Label::Evasion(_) => LabelFamily::Evasion,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Label::Clarity(c) => c.index(),
            Label::Evasion(e) => e.index(),
        }
    }

    pub fn from_index(family: LabelFamily, i: usize) -> Option<Label> {
        match family {
            LabelFamily::Clarity => ClarityLabel::from_index(i).map(Label::Clarity),
            LabelFamily::Evasion => EvasionLabel::from_index(i).map(Label::Evasion),
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Label::Clarity(c) => c.display_name(),
            Label::Evasion(e) => e.display_name(),
        }
    }

    pub fn as_clarity(self) -> Option<ClarityLabel> {
        match self {
            Label::Clarity(c) => Some(c),
            Label::Evasion(_) => None,
        }
    }

    pub fn as_evasion(self) -> Option<EvasionLabel> {
        match self {
            Label::Evasion(e) => Some(e),
            Label::Clarity(_) => None,
        }
    }

    /// The clarity level this label implies: itself for clarity labels, the
    /// taxonomy parent for evasion labels.
    pub fn to_clarity(self) -> ClarityLabel {
        match self {
            Label::Clarity(c) => c,
            Label::Evasion(e) => e.clarity(),
        }
    }
}

impl From<ClarityLabel> for Label {
    fn from(c: ClarityLabel) -> Self {
        Label::Clarity(c)
    }
}

impl From<EvasionLabel> for Label {
    fn from(e: EvasionLabel) -> Self {
        Label::Evasion(e)
    }
}

macro_rules! display_serde {
    ($ty:ty, $parse:path) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.display_name())
            }
        }

        impl FromStr for $ty {
            type Err = TaxonomyError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                $parse(s)
            }
        }

        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(self.display_name())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                $parse(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

display_serde!(ClarityLabel, parse_clarity);
display_serde!(EvasionLabel, parse_evasion);

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}
