//! Manual prompt templates: the built-in registry, the parameterized
//! `[MASK]` family, and a TOML loader for user-defined templates.

use std::fmt;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

/// Placeholder for the input sentence inside a template pattern.
pub const SENTENCE_SLOT: &str = "[X]";
/// Literal mask token text rendered by discriminative templates.
pub const MASK_TOKEN: &str = "[MASK]";
/// Literal separator token text used as a terminal character.
pub const SEP_TOKEN: &str = "[SEP]";

/// Mask counts covered by the standard 1-4 sweep; larger counts are allowed but flagged.
pub const SWEEP_MAX_MASKS: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("sentence is empty after trimming")]
    EmptySentence,
    #[error("mask count must be at least 1")]
    InvalidMaskCount,
    #[error("unknown template id `{0}`")]
    UnknownTemplate(String),
    #[error("template `{id}`: {reason}")]
    Invalid { id: String, reason: String },
    #[error("template file {path}: {reason}")]
    File { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Generative,
    Discriminative,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Generative => f.write_str("generative"),
            Family::Discriminative => f.write_str("discriminative"),
        }
    }
}

/// Where the sentence embedding is read from in the model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaptureRule {
    LastToken,
    MaskTokens(usize),
}

impl CaptureRule {
    /// True for mask counts beyond the standard 1-4 sweep.
    pub fn outside_sweep(&self) -> bool {
        matches!(self, CaptureRule::MaskTokens(n) if *n > SWEEP_MAX_MASKS)
    }

    fn parse(s: &str) -> Option<Self> {
        if s == "last" {
            return Some(CaptureRule::LastToken);
        }
        let n = s.strip_prefix("mask:")?.parse::<usize>().ok()?;
        (n >= 1).then_some(CaptureRule::MaskTokens(n))
    }
}

impl fmt::Display for CaptureRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaptureRule::LastToken => f.write_str("last"),
            CaptureRule::MaskTokens(n) => write!(f, "mask:{n}"),
        }
    }
}

/// Terminal character appended after the mask tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Eos {
    None,
    Sep,
    Period,
    Exclamation,
    Question,
}

impl Eos {
    pub const ALL: [Eos; 5] = [Eos::None, Eos::Sep, Eos::Period, Eos::Exclamation, Eos::Question];

    /// Short name used in ids and on the command line.
    pub fn name(self) -> &'static str {
        match self {
            Eos::None => "none",
            Eos::Sep => "sep",
            Eos::Period => "period",
            Eos::Exclamation => "bang",
            Eos::Question => "question",
        }
    }

    /// Column label in sweep tables.
    pub fn label(self) -> &'static str {
        match self {
            Eos::None => "None",
            Eos::Sep => SEP_TOKEN,
            Eos::Period => ".",
            Eos::Exclamation => "!",
            Eos::Question => "?",
        }
    }

    /// Text appended after the last mask token. Terminal characters are
    /// separated from the masks by one space.
    pub fn rendered(self) -> &'static str {
        match self {
            Eos::None => "",
            Eos::Sep => " [SEP]",
            Eos::Period => " .",
            Eos::Exclamation => " !",
            Eos::Question => " ?",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Some(Eos::None),
            "sep" | "[sep]" => Some(Eos::Sep),
            "period" | "." => Some(Eos::Period),
            "bang" | "exclamation" | "!" => Some(Eos::Exclamation),
            "question" | "?" => Some(Eos::Question),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskTemplateConfig {
    pub mask_count: usize,
    pub eos: Eos,
}

/// A manual template with exactly one sentence slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptTemplate {
    id: String,
    prefix: String,
    suffix: String,
    capture: CaptureRule,
    family: Family,
}

impl PromptTemplate {
    /// Builds a template from its parts, checking that the family and
    /// capture rule agree.
    pub fn new(
        id: impl Into<String>,
        prefix: impl Into<String>,
        suffix: impl Into<String>,
        capture: CaptureRule,
        family: Family,
    ) -> Result<Self, TemplateError> {
        let id = id.into();
        let invalid = |reason: &str| TemplateError::Invalid {
            id: id.clone(),
            reason: reason.to_string(),
        };
        match (family, capture) {
            (Family::Generative, CaptureRule::LastToken) => {}
            (Family::Discriminative, CaptureRule::MaskTokens(n)) if n >= 1 => {}
            (Family::Generative, _) => return Err(invalid("generative templates capture the last token")),
            (Family::Discriminative, _) => {
                return Err(invalid("discriminative templates capture one or more mask tokens"))
            }
        }
        if id.is_empty() {
            return Err(invalid("empty id"));
        }
        Ok(Self {
            prefix: prefix.into(),
            suffix: suffix.into(),
            id,
            capture,
            family,
        })
    }

    /// Splits a single-line pattern on its `[X]` slot.
    pub fn from_pattern(
        id: impl Into<String>,
        family: Family,
        pattern: &str,
        capture: CaptureRule,
    ) -> Result<Self, TemplateError> {
        let id = id.into();
        let invalid = |reason: &str| TemplateError::Invalid {
            id: id.clone(),
            reason: reason.to_string(),
        };
        if pattern.contains('\n') || pattern.contains('\r') {
            return Err(invalid("pattern must be a single line"));
        }
        let mut parts = pattern.split(SENTENCE_SLOT);
        let (Some(prefix), Some(suffix), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(invalid("pattern must contain exactly one [X] slot"));
        };
        if let CaptureRule::MaskTokens(n) = capture {
            let found = suffix.matches(MASK_TOKEN).count() + prefix.matches(MASK_TOKEN).count();
            if found != n {
                return Err(invalid(&format!("capture declares {n} masks, pattern has {found}")));
            }
        }
        Self::new(id, prefix, suffix, capture, family)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn suffix(&self) -> &str {
        &self.suffix
    }

    pub fn capture(&self) -> CaptureRule {
        self.capture
    }

    pub fn family(&self) -> Family {
        self.family
    }

    /// The template with `[X]` in place of the sentence.
    pub fn pattern(&self) -> String {
        format!("{}{}{}", self.prefix, SENTENCE_SLOT, self.suffix)
    }

    /// Name used in report tables; falls back to the id for custom templates.
    pub fn display_name(&self) -> String {
        display_name(&self.id).map_or_else(|| self.id.clone(), str::to_string)
    }

    /// Substitutes the trimmed sentence into the slot. The sentence is
    /// otherwise inserted verbatim: no escaping, no case change.
    pub fn render(&self, sentence: &str) -> Result<String, TemplateError> {
        let sentence = sentence.trim();
        if sentence.is_empty() {
            return Err(TemplateError::EmptySentence);
        }
        let mut out = String::with_capacity(self.prefix.len() + sentence.len() + self.suffix.len());
        out.push_str(&self.prefix);
        out.push_str(sentence);
        out.push_str(&self.suffix);
        Ok(out)
    }

    /// Character span `[start, end)` of the trimmed sentence inside the rendered prompt.
    pub fn sentence_span(&self, sentence: &str) -> (usize, usize) {
        let start = self.prefix.chars().count();
        (start, start + sentence.trim().chars().count())
    }

    /// Character offset at which the suffix starts in a rendered prompt.
    pub fn suffix_start(&self, rendered: &str) -> usize {
        rendered.chars().count() - self.suffix.chars().count()
    }
}

const EOL_SUFFIX: &str = "\" means in one word:\"";
const THIS_SENTENCE: &str = "his sentence : \"";

fn display_name(id: &str) -> Option<&'static str> {
    Some(match id {
        "prompt_eol" => "PromptEOL",
        "prompt_sth" => "PromptSTH",
        "prompt_sum" => "PromptSUM",
        "pretended_cot" => "Pretended CoT",
        "knowledge_enhancement" => "Knowledge Enhancement",
        _ => return None,
    })
}

/// The built-in generative templates.
pub fn registry() -> Vec<PromptTemplate> {
    let generative = |id: &str, prefix: String, suffix: &str| {
        PromptTemplate::new(id, prefix, suffix, CaptureRule::LastToken, Family::Generative)
            .expect("built-in template is well formed")
    };
    vec![
        generative("prompt_eol", format!("T{THIS_SENTENCE}"), EOL_SUFFIX),
        generative("prompt_sth", format!("T{THIS_SENTENCE}"), "\" means something"),
        generative("prompt_sum", format!("T{THIS_SENTENCE}"), "\" can be summarized as"),
        generative(
            "pretended_cot",
            format!("After thinking step by step , t{THIS_SENTENCE}"),
            EOL_SUFFIX,
        ),
        generative(
            "knowledge_enhancement",
            format!(
                "The essence of a sentence is often captured by its main subjects and actions, \
                 while descriptive terms provide additional but less central details. \
                 With this in mind , t{THIS_SENTENCE}"
            ),
            EOL_SUFFIX,
        ),
    ]
}

/// Discriminative template `This sentence : "[X]" means [MASK]...[MASK]<eos>`.
pub fn build_mask_template(config: MaskTemplateConfig) -> Result<PromptTemplate, TemplateError> {
    if config.mask_count == 0 {
        return Err(TemplateError::InvalidMaskCount);
    }
    let suffix = format!(
        "\" means {}{}",
        MASK_TOKEN.repeat(config.mask_count),
        config.eos.rendered()
    );
    PromptTemplate::new(
        mask_template_id(config),
        format!("T{THIS_SENTENCE}"),
        suffix,
        CaptureRule::MaskTokens(config.mask_count),
        Family::Discriminative,
    )
}

/// Id of a generated mask template, e.g. `mask2_bang`.
pub fn mask_template_id(config: MaskTemplateConfig) -> String {
    format!("mask{}_{}", config.mask_count, config.eos.name())
}

fn parse_mask_id(id: &str) -> Option<MaskTemplateConfig> {
    let (count, eos) = id.strip_prefix("mask")?.split_once('_')?;
    let mask_count = count.parse().ok()?;
    let eos = Eos::ALL.into_iter().find(|e| e.name() == eos)?;
    Some(MaskTemplateConfig { mask_count, eos })
}

/// Built-in templates plus any loaded from files. Ids of the form
/// `mask<N>_<eos>` resolve to generated discriminative templates.
#[derive(Debug, Clone)]
pub struct Registry {
    templates: Vec<PromptTemplate>,
}

impl Default for Registry {
    fn default() -> Self {
        Self { templates: registry() }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    #[serde(default, rename = "template")]
    templates: Vec<TemplateRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateRecord {
    id: String,
    family: Family,
    pattern: String,
    capture: String,
}

impl Registry {
    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Option<PromptTemplate> {
        if let Some(t) = self.templates.iter().find(|t| t.id == id) {
            return Some(t.clone());
        }
        parse_mask_id(id).and_then(|c| build_mask_template(c).ok())
    }

    pub fn lookup(&self, id: &str) -> Result<PromptTemplate, TemplateError> {
        self.get(id)
            .ok_or_else(|| TemplateError::UnknownTemplate(id.to_string()))
    }

    /// Adds a template; an existing template with the same id is replaced.
    pub fn insert(&mut self, template: PromptTemplate) {
        match self.templates.iter_mut().find(|t| t.id == template.id) {
            Some(slot) => *slot = template,
            None => self.templates.push(template),
        }
    }

    /// Parses TOML of the form
    ///
    /// ```toml
    /// [[template]]
    /// id = "my_eol"
    /// family = "generative"
    /// capture = "last"          # or "mask:N"
    /// pattern = 'This sentence : "[X]" means in one word:"'
    /// ```
    pub fn parse_templates(source: &str, origin: &str) -> Result<Vec<PromptTemplate>, TemplateError> {
        let file_err = |reason: String| TemplateError::File {
            path: origin.to_string(),
            reason,
        };
        let file: TemplateFile = toml::from_str(source).map_err(|e| file_err(e.to_string()))?;
        file.templates
            .into_iter()
            .map(|r| {
                let capture = CaptureRule::parse(&r.capture)
                    .ok_or_else(|| file_err(format!("template `{}`: bad capture `{}`", r.id, r.capture)))?;
                PromptTemplate::from_pattern(r.id, r.family, &r.pattern, capture)
            })
            .collect()
    }

    pub fn load_file(&mut self, path: &Path) -> Result<usize, TemplateError> {
        let origin = path.display().to_string();
        let source = std::fs::read_to_string(path).map_err(|e| TemplateError::File {
            path: origin.clone(),
            reason: e.to_string(),
        })?;
        let parsed = Self::parse_templates(&source, &origin)?;
        let n = parsed.len();
        for t in parsed {
            self.insert(t);
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn builtin(id: &str) -> PromptTemplate {
        Registry::default().lookup(id).unwrap()
    }

    #[test]
    fn renders_prompt_eol() {
        let out = builtin("prompt_eol").render("a man is driving a car").unwrap();
        assert_eq!(out, r#"This sentence : "a man is driving a car" means in one word:""#);
    }

    #[test]
    fn renders_prompt_sum() {
        assert_eq!(
            builtin("prompt_sum").render("s").unwrap(),
            r#"This sentence : "s" can be summarized as"#
        );
    }

    #[test]
    fn renders_knowledge_enhancement() {
        let out = builtin("knowledge_enhancement").render("x").unwrap();
        assert!(out.starts_with("The essence of a sentence is often captured by its main subjects and actions,"));
        assert!(out.ends_with(r#"With this in mind , this sentence : "x" means in one word:""#));
    }

    #[test]
    fn registry_prefixes_and_suffixes() {
        assert!(builtin("pretended_cot")
            .prefix()
            .starts_with("After thinking step by step , "));
        assert!(builtin("prompt_sth").suffix().ends_with(" means something"));
        assert!(Registry::default().get("no_such_template").is_none());
        assert_eq!(
            Registry::default().lookup("nope"),
            Err(TemplateError::UnknownTemplate("nope".into()))
        );
    }

    #[test]
    fn empty_sentence_rejected() {
        assert_eq!(builtin("prompt_eol").render("  \t "), Err(TemplateError::EmptySentence));
    }

    #[test]
    fn sentence_is_trimmed_but_not_escaped() {
        let out = builtin("prompt_eol").render("  he said \"hi\"\n").unwrap();
        assert_eq!(out, r#"This sentence : "he said "hi"" means in one word:""#);
    }

    #[test]
    fn mask_templates() {
        let build = |mask_count, eos| build_mask_template(MaskTemplateConfig { mask_count, eos }).unwrap();
        assert_eq!(
            build(2, Eos::Exclamation).pattern(),
            r#"This sentence : "[X]" means [MASK][MASK] !"#
        );
        assert_eq!(build(1, Eos::None).pattern(), r#"This sentence : "[X]" means [MASK]"#);
        assert_eq!(
            build(1, Eos::Sep).pattern(),
            r#"This sentence : "[X]" means [MASK] [SEP]"#
        );
        assert_eq!(build(3, Eos::Question).capture(), CaptureRule::MaskTokens(3));
        assert_eq!(build(3, Eos::Question).family(), Family::Discriminative);
        assert_eq!(
            build_mask_template(MaskTemplateConfig {
                mask_count: 0,
                eos: Eos::Period
            }),
            Err(TemplateError::InvalidMaskCount)
        );
    }

    #[test]
    fn mask_ids_resolve() {
        let t = Registry::default().lookup("mask3_period").unwrap();
        assert_eq!(t.pattern(), r#"This sentence : "[X]" means [MASK][MASK][MASK] ."#);
        assert!(Registry::default().get("mask0_period").is_none());
        assert!(Registry::default().get("mask2_comma").is_none());
        assert!(!t.capture().outside_sweep());
        assert!(Registry::default()
            .lookup("mask5_bang")
            .unwrap()
            .capture()
            .outside_sweep());
    }

    #[test]
    fn family_capture_mismatch_rejected() {
        let err = PromptTemplate::new("x", "a", "b", CaptureRule::MaskTokens(1), Family::Generative);
        assert!(matches!(err, Err(TemplateError::Invalid { .. })));
        let err = PromptTemplate::new("x", "a", "b", CaptureRule::LastToken, Family::Discriminative);
        assert!(matches!(err, Err(TemplateError::Invalid { .. })));
    }

    #[test]
    fn loads_toml_templates() {
        let src = r#"
[[template]]
id = "custom_eol"
family = "generative"
capture = "last"
pattern = 'In short , "[X]" means in one word:"'

[[template]]
id = "custom_mask"
family = "discriminative"
capture = "mask:2"
pattern = '"[X]" is [MASK][MASK] .'
"#;
        let parsed = Registry::parse_templates(src, "inline").unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].render("x").unwrap(), r#"In short , "x" means in one word:""#);
        assert_eq!(parsed[1].capture(), CaptureRule::MaskTokens(2));
    }

    #[test]
    fn toml_errors() {
        let two_slots = "[[template]]\nid='a'\nfamily='generative'\ncapture='last'\npattern='[X] [X]'\n";
        assert!(matches!(
            Registry::parse_templates(two_slots, "t"),
            Err(TemplateError::Invalid { .. })
        ));
        let bad_capture = "[[template]]\nid='a'\nfamily='generative'\ncapture='first'\npattern='[X]'\n";
        assert!(matches!(
            Registry::parse_templates(bad_capture, "t"),
            Err(TemplateError::File { .. })
        ));
        let wrong_masks = "[[template]]\nid='a'\nfamily='discriminative'\ncapture='mask:2'\npattern='[X] [MASK]'\n";
        assert!(matches!(
            Registry::parse_templates(wrong_masks, "t"),
            Err(TemplateError::Invalid { .. })
        ));
    }

    proptest! {
        #[test]
        fn render_round_trips(s in "[ -~]{0,40}[a-zA-Z0-9][ -~]{0,40}") {
            for t in registry() {
                let out = t.render(&s).unwrap();
                let trimmed = s.trim();
                prop_assert!(out.contains(trimmed));
                prop_assert!(out.starts_with(t.prefix()));
                prop_assert!(out.ends_with(t.suffix()));
                prop_assert_eq!(&out[t.prefix().len()..out.len() - t.suffix().len()], trimmed);
            }
        }

        #[test]
        fn mask_count_is_exact(n in 1usize..12, eos in 0usize..5) {
            let t = build_mask_template(MaskTemplateConfig { mask_count: n, eos: Eos::ALL[eos] }).unwrap();
            prop_assert_eq!(t.render("a b c").unwrap().matches(MASK_TOKEN).count(), n);
        }
    }
}
