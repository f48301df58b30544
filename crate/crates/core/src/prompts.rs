//! Prompt templates: the bundled set, user-supplied template directories and
//! rendering.
//!
//! A template body is plain text holding the literal token `%s` exactly once;
//! rendering replaces that token with the question verbatim. Bodies are kept
//! byte-for-byte as stored, whitespace included.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PLACEHOLDER: &str = "%s";

const BUILTIN_MANIFEST: &str = include_str!("../templates/manifest.toml");
const BUILTIN_BODIES: &[(&str, &str)] = &[
    ("original.txt", include_str!("../templates/original.txt")),
    ("magprompt.txt", include_str!("../templates/magprompt.txt")),
    ("prompt2.txt", include_str!("../templates/prompt2.txt")),
    ("prompt3.txt", include_str!("../templates/prompt3.txt")),
    ("prompt4.txt", include_str!("../templates/prompt4.txt")),
    (
        "rule2_only.txt",
        include_str!("../templates/rule2_only.txt"),
    ),
    (
        "rule1_only.txt",
        include_str!("../templates/rule1_only.txt"),
    ),
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error(
        "template {id:?} must contain the placeholder {PLACEHOLDER:?} exactly once, found {count}"
    )]
    Placeholder { id: String, count: usize },
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("duplicate template id {0:?}")]
    DuplicateId(String),
    #[error("invalid template manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The two design rules a template may carry: R1 (answer from the image
/// content) and R2 (prefer the image when it conflicts with prior knowledge).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    R1,
    R2,
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "R1" => Ok(Rule::R1),
            "R2" => Ok(Rule::R2),
            other => Err(format!("unknown rule {other:?}")),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::R1 => "R1",
            Rule::R2 => "R2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
    pub rules: BTreeSet<Rule>,
    pub source: String,
}

impl PromptTemplate {
    /// Builds a template, rejecting bodies without exactly one placeholder.
    pub fn new(
        id: impl Into<String>,
        body: impl Into<String>,
        rules: impl IntoIterator<Item = Rule>,
        source: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let template = Self {
            id: id.into(),
            body: body.into(),
            rules: rules.into_iter().collect(),
            source: source.into(),
        };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let count = self.body.matches(PLACEHOLDER).count();
        if count != 1 {
            return Err(PromptError::Placeholder {
                id: self.id.clone(),
                count,
            });
        }
        Ok(())
    }

    pub fn is_pass_through(&self) -> bool {
        self.body == PLACEHOLDER
    }

    /// Hex SHA-256 of the body, used to pin a template into run identities.
    pub fn body_sha256(&self) -> String {
        hex::encode(Sha256::digest(self.body.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_id: String,
    pub question: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub fn render(template: &PromptTemplate, question: &str) -> Result<RenderedPrompt, PromptError> {
    template.validate()?;
    let warning = if question.is_empty() {
        tracing::warn!(template = %template.id, "rendering template with an empty question");
        Some("empty question".to_string())
    } else {
        None
    };
    Ok(RenderedPrompt {
        template_id: template.id.clone(),
        question: question.to_string(),
        text: template.body.replacen(PLACEHOLDER, question, 1),
        warning,
    })
}

#[derive(Debug, Deserialize)]
struct ManifestFile {
    #[serde(default, rename = "template")]
    templates: Vec<ManifestEntry>,
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    id: String,
    file: String,
    #[serde(default)]
    rules: Vec<String>,
    #[serde(default)]
    source: String,
}

/// An id-indexed collection of templates.
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
    order: Vec<String>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let mut set = Self::default();
        let manifest_path = PathBuf::from("<builtin>/manifest.toml");
        let entries = parse_manifest(BUILTIN_MANIFEST, &manifest_path)
            .expect("bundled template manifest parses");
        for entry in entries {
            let body = BUILTIN_BODIES
                .iter()
                .find(|(name, _)| *name == entry.file)
                .map(|(_, body)| *body)
                .expect("bundled template file listed in manifest");
            let template = entry_to_template(entry, body.to_string(), &manifest_path)
                .expect("bundled template is valid");
            set.insert(template)
                .expect("bundled template ids are unique");
        }
        set
    }

    /// Loads `manifest.toml` and the template files it names from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let manifest_path = dir.join("manifest.toml");
        let text = std::fs::read_to_string(&manifest_path).map_err(|source| PromptError::Io {
            path: manifest_path.clone(),
            source,
        })?;
        let mut set = Self::default();
        for entry in parse_manifest(&text, &manifest_path)? {
            let path = dir.join(&entry.file);
            let body = std::fs::read_to_string(&path)
                .map_err(|source| PromptError::Io { path, source })?;
            set.insert(entry_to_template(entry, body, &manifest_path)?)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, template: PromptTemplate) -> Result<(), PromptError> {
        template.validate()?;
        if self.templates.contains_key(&template.id) {
            return Err(PromptError::DuplicateId(template.id));
        }
        self.order.push(template.id.clone());
        self.templates.insert(template.id.clone(), template);
        Ok(())
    }

    /// Adds every template of `other`, failing on id collisions.
    pub fn extend(&mut self, other: TemplateSet) -> Result<(), PromptError> {
        for template in other.into_templates() {
            self.insert(template)?;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn into_templates(mut self) -> Vec<PromptTemplate> {
        self.order
            .iter()
            .filter_map(|id| self.templates.remove(id))
            .collect()
    }
}

/// The bundled templates in manifest order.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    TemplateSet::builtin().into_templates()
}

fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>, PromptError> {
    let manifest: ManifestFile = toml::from_str(text).map_err(|e| PromptError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(manifest.templates)
}

fn entry_to_template(
    entry: ManifestEntry,
    body: String,
    manifest_path: &Path,
) -> Result<PromptTemplate, PromptError> {
    let rules = entry
        .rules
        .iter()
        .map(|r| r.parse::<Rule>())
        .collect::<Result<BTreeSet<_>, _>>()
        .map_err(|message| PromptError::Manifest {
            path: manifest_path.to_path_buf(),
            message,
        })?;
    PromptTemplate::new(entry.id, body, rules, entry.source)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_ids_in_order() {
        let ids: Vec<_> = builtin_templates().into_iter().map(|t| t.id).collect();
        assert_eq!(
            ids,
            [
                "original",
                "magprompt",
                "prompt2",
                "prompt3",
                "prompt4",
                "rule2_only",
                "rule1_only"
            ]
        );
    }

    #[test]
    fn builtin_rule_flags() {
        let set = TemplateSet::builtin();
        assert!(set.get("original").unwrap().rules.is_empty());
        assert_eq!(
            set.get("magprompt").unwrap().rules,
            BTreeSet::from([Rule::R1, Rule::R2])
        );
        assert_eq!(
            set.get("rule2_only").unwrap().rules,
            BTreeSet::from([Rule::R2])
        );
        assert_eq!(
            set.get("rule1_only").unwrap().rules,
            BTreeSet::from([Rule::R1])
        );
    }

    #[test]
    fn lookup_bodies() {
        let set = TemplateSet::builtin();
        assert!(set.get("magprompt").unwrap().body.starts_with(
            "You are tasked with answering a question based on the image with following rules:"
        ));
        assert_eq!(set.get("original").unwrap().body, PLACEHOLDER);
        assert!(set.get("prompt4").unwrap().body.starts_with(
            "Answer the following question by referring exclusively to the image provided"
        ));
        assert!(matches!(
            set.get("cot"),
            Err(PromptError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn render_original_is_identity() {
        let set = TemplateSet::builtin();
        let rendered = render(set.get("original").unwrap(), "Is there a dog?").unwrap();
        assert_eq!(rendered.text, "Is there a dog?");
        assert!(rendered.warning.is_none());
    }

    #[test]
    fn render_empty_question_warns() {
        let set = TemplateSet::builtin();
        let rendered = render(set.get("magprompt").unwrap(), "").unwrap();
        assert!(rendered.text.contains("Question: \"\"\n"));
        assert_eq!(rendered.warning.as_deref(), Some("empty question"));
    }

    #[test]
    fn question_containing_placeholder_is_not_resubstituted() {
        let set = TemplateSet::builtin();
        let rendered = render(set.get("magprompt").unwrap(), "what is %s?").unwrap();
        assert!(rendered.text.contains("Question: \"what is %s?\""));
    }

    #[test]
    fn placeholder_count_is_validated() {
        let err = PromptTemplate::new("none", "no slot here", [], "").unwrap_err();
        assert!(matches!(err, PromptError::Placeholder { count: 0, .. }));
        let err = PromptTemplate::new("two", "%s and %s", [], "").unwrap_err();
        assert!(matches!(err, PromptError::Placeholder { count: 2, .. }));

        let bad = PromptTemplate {
            id: "bad".into(),
            body: "nothing".into(),
            rules: BTreeSet::new(),
            source: String::new(),
        };
        assert!(render(&bad, "q").is_err());
    }

    #[test]
    fn load_user_templates_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("manifest.toml"),
            "[[template]]\nid = \"terse\"\nfile = \"terse.txt\"\nrules = [\"R1\"]\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("terse.txt"), "Look closely.\n%s\n").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        let rendered = render(set.get("terse").unwrap(), "Is it red?").unwrap();
        assert_eq!(rendered.text, "Look closely.\nIs it red?\n");

        let mut all = TemplateSet::builtin();
        all.extend(set).unwrap();
        assert!(all.get("terse").is_ok());
    }

    #[test]
    fn user_template_without_placeholder_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("manifest.toml"),
            "[[template]]\nid = \"broken\"\nfile = \"broken.txt\"\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("broken.txt"), "no slot").unwrap();
        assert!(matches!(
            TemplateSet::load_dir(dir.path()),
            Err(PromptError::Placeholder { .. })
        ));
    }
}
