//! Caption, image and pair filtering over line-delimited JSON manifests.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use regex::Regex;
use serde::{Deserialize, Serialize};
use tecswin_tensor::splitmix64;

use crate::error::{Error, Result};

pub const MIN_CAPTION_CHARS: usize = 5;
pub const MAX_PERPLEXITY: f64 = 6.5;
pub const MIN_CHARSET_RATIO: f64 = 0.70;
pub const MIN_SIDE: u32 = 64;
pub const MAX_ASPECT: f64 = 2.0;
pub const MIN_COSINE: f64 = 0.20;

/// One image-text pair as stored in a manifest line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_emb: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_emb: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    /// Content hash of the image bytes; the reference string is used when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_hash: Option<String>,
    /// Templated prompt, written for kept records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    Length,
    Pattern,
    Perplexity,
    Charset,
    Resolution,
    Aspect,
    Similarity,
    Detector,
    Duplicate,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Length => "length",
            Self::Pattern => "pattern",
            Self::Perplexity => "perplexity",
            Self::Charset => "charset",
            Self::Resolution => "resolution",
            Self::Aspect => "aspect",
            Self::Similarity => "similarity",
            Self::Detector => "detector",
            Self::Duplicate => "duplicate",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub keep: bool,
    pub reasons: Vec<Reason>,
}

impl FilterVerdict {
    pub fn from_reasons(reasons: Vec<Reason>) -> Self {
        Self {
            keep: reasons.is_empty(),
            reasons,
        }
    }

    pub fn keep() -> Self {
        Self::from_reasons(Vec::new())
    }

    fn merge(&mut self, other: FilterVerdict) {
        self.reasons.extend(other.reasons);
        self.keep = self.reasons.is_empty();
    }
}

/// A record the rules could not judge; it is set aside, not dropped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quarantine(pub String);

impl std::fmt::Display for Quarantine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "quarantined: {}", self.0)
    }
}

pub type Judgement = std::result::Result<FilterVerdict, Quarantine>;

/// Caption perplexity under some language model.
pub trait PerplexityScorer {
    fn score(&self, caption: &str) -> std::result::Result<f64, String>;
}

/// Deterministic stand-in scorer: a hash of the caption mapped into
/// `[2, 8)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct HashPerplexity {
    pub seed: u64,
}

impl PerplexityScorer for HashPerplexity {
    fn score(&self, caption: &str) -> std::result::Result<f64, String> {
        let mut h = self.seed;
        for b in caption.as_bytes() {
            h = splitmix64(h ^ *b as u64);
        }
        Ok(2.0 + 6.0 * (h >> 11) as f64 / (1u64 << 53) as f64)
    }
}

/// Share of the caption written in the script expected for its language.
pub trait CharsetRatio {
    fn ratio(&self, caption: &str, lang: &str) -> f64;
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0xF900..=0xFAFF)
}

/// Counts CJK ideographs for `zh` and Latin letters otherwise; whitespace,
/// punctuation and digits are left out of the denominator.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScriptRatio;

impl CharsetRatio for ScriptRatio {
    fn ratio(&self, caption: &str, lang: &str) -> f64 {
        let mut total = 0usize;
        let mut hits = 0usize;
        for c in caption.chars() {
            if c.is_whitespace() || c.is_ascii_digit() || c.is_ascii_punctuation() || is_cjk_punct(c) {
                continue;
            }
            total += 1;
            let ok = if lang == "zh" { is_cjk(c) } else { c.is_ascii_alphabetic() };
            hits += ok as usize;
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

fn is_cjk_punct(c: char) -> bool {
    matches!(c as u32, 0x3000..=0x303F | 0xFF00..=0xFF0F | 0xFF1A..=0xFF20 | 0x2010..=0x206F)
}

/// Detector hook for watermark, safety or near-duplicate models.
pub trait ImageDetector {
    fn flags(&self, record: &PairRecord) -> std::result::Result<bool, String>;
}

#[derive(Clone, Debug)]
pub struct TextRules {
    pub min_chars: usize,
    pub max_perplexity: f64,
    pub min_charset_ratio: f64,
    pub patterns: Vec<Regex>,
}

pub const DEFAULT_PATTERNS: &[&str] = &[
    r"(?i)^\s*[\w\-]*\d+\.(jpe?g|png|gif|bmp|webp)\s*$",
    r"(?i)^\s*(image|img|screenshot|photo|picture|dsc)[\s_\-]*\d+\s*$",
    r"(?i)click\s+(here\s+)?for\s+more",
    r"^[A-Z0-9][A-Z0-9_\-]*\d[A-Z0-9_\-]*$",
    r"点击查看",
];

impl TextRules {
    pub fn with_patterns(patterns: &[&str]) -> Result<Self> {
        let patterns = patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|e| Error::Config(format!("pattern {p:?}: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            min_chars: MIN_CAPTION_CHARS,
            max_perplexity: MAX_PERPLEXITY,
            min_charset_ratio: MIN_CHARSET_RATIO,
            patterns,
        })
    }
}

impl Default for TextRules {
    fn default() -> Self {
        Self::with_patterns(DEFAULT_PATTERNS).expect("built-in patterns compile")
    }
}

/// Keeps captions longer than five characters with perplexity at most 6.5
/// and at least 70% target-script characters.
pub fn filter_text(
    caption: &str,
    lang: &str,
    perplexity: Option<f64>,
    scorer: &dyn PerplexityScorer,
    charset: &dyn CharsetRatio,
    rules: &TextRules,
) -> Judgement {
    let trimmed = caption.trim();
    let mut reasons = Vec::new();
    if trimmed.chars().count() <= rules.min_chars {
        reasons.push(Reason::Length);
    }
    if rules.patterns.iter().any(|p| p.is_match(trimmed)) {
        reasons.push(Reason::Pattern);
    }
    let ppl = match perplexity {
        Some(p) => p,
        None => scorer.score(trimmed).map_err(|e| Quarantine(format!("perplexity scorer: {e}")))?,
    };
    if !ppl.is_finite() {
        return Err(Quarantine(format!("perplexity {ppl}")));
    }
    if ppl > rules.max_perplexity {
        reasons.push(Reason::Perplexity);
    }
    if charset.ratio(trimmed, lang) < rules.min_charset_ratio {
        reasons.push(Reason::Charset);
    }
    Ok(FilterVerdict::from_reasons(reasons))
}

/// Drops images with a side below 64 px or an aspect ratio of 2 or more.
pub fn filter_image(width: Option<u32>, height: Option<u32>) -> Judgement {
    let (Some(w), Some(h)) = (width, height) else {
        return Err(Quarantine("image dimensions missing".into()));
    };
    if w == 0 || h == 0 {
        return Err(Quarantine(format!("degenerate image {w}x{h}")));
    }
    let mut reasons = Vec::new();
    if w.min(h) < MIN_SIDE {
        reasons.push(Reason::Resolution);
    }
    if w.max(h) as f64 / w.min(h) as f64 >= MAX_ASPECT {
        reasons.push(Reason::Aspect);
    }
    Ok(FilterVerdict::from_reasons(reasons))
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> std::result::Result<f64, Quarantine> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Quarantine(format!("embedding sizes {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Quarantine("zero embedding".into()));
    }
    Ok(dot / (na * nb))
}

pub fn similarity_verdict(cosine: f64) -> FilterVerdict {
    if cosine < MIN_COSINE {
        FilterVerdict::from_reasons(vec![Reason::Similarity])
    } else {
        FilterVerdict::keep()
    }
}

/// Drops pairs whose embedding cosine similarity is below 0.20.
pub fn filter_pair(text_emb: &[f32], image_emb: &[f32]) -> Judgement {
    Ok(similarity_verdict(cosine_similarity(text_emb, image_emb)?))
}

pub fn template_prompt(caption: &str, lang: &str) -> String {
    match lang {
        "zh" => format!("这是一张关于{caption}的图片"),
        _ => format!("This is an image of {caption}"),
    }
}

/// Spelled-out ordinal for a class number.
pub trait OrdinalFormatter {
    fn ordinal(&self, n: u32) -> String;
}

const EN_ONES: [&str; 20] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
];
const EN_TENS: [&str; 10] = [
    "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

fn en_cardinal(n: u32) -> String {
    match n {
        0..=19 => EN_ONES[n as usize].to_string(),
        20..=99 => {
            let (t, o) = (n / 10, n % 10);
            if o == 0 {
                EN_TENS[t as usize].to_string()
            } else {
                format!("{}-{}", EN_TENS[t as usize], EN_ONES[o as usize])
            }
        }
        100..=999 => {
            let (h, r) = (n / 100, n % 100);
            if r == 0 {
                format!("{} hundred", EN_ONES[h as usize])
            } else {
                format!("{} hundred and {}", EN_ONES[h as usize], en_cardinal(r))
            }
        }
        _ => {
            let (th, r) = (n / 1000, n % 1000);
            match r {
                0 => format!("{} thousand", en_cardinal(th)),
                1..=99 => format!("{} thousand and {}", en_cardinal(th), en_cardinal(r)),
                _ => format!("{} thousand {}", en_cardinal(th), en_cardinal(r)),
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EnglishOrdinal;

impl OrdinalFormatter for EnglishOrdinal {
    fn ordinal(&self, n: u32) -> String {
        let card = en_cardinal(n);
        let (head, last) = match card.rfind([' ', '-']) {
            Some(i) => card.split_at(i + 1),
            None => ("", card.as_str()),
        };
        let last = match last {
            "one" => "first".to_string(),
            "two" => "second".to_string(),
            "three" => "third".to_string(),
            "five" => "fifth".to_string(),
            "eight" => "eighth".to_string(),
            "nine" => "ninth".to_string(),
            "twelve" => "twelfth".to_string(),
            w if w.ends_with('y') => format!("{}ieth", &w[..w.len() - 1]),
            w => format!("{w}th"),
        };
        format!("{head}{last}")
    }
}

const ZH_DIGITS: [&str; 10] = ["零", "一", "二", "三", "四", "五", "六", "七", "八", "九"];

fn zh_cardinal(n: u32) -> String {
    if n < 10 {
        return ZH_DIGITS[n as usize].to_string();
    }
    if n < 20 {
        return format!("十{}", if n == 10 { "" } else { ZH_DIGITS[(n - 10) as usize] });
    }
    let units = [(1000, "千"), (100, "百"), (10, "十"), (1, "")];
    let mut out = String::new();
    let mut pending_zero = false;
    let mut started = false;
    let mut rest = n % 10_000;
    for (value, name) in units {
        let d = rest / value;
        rest %= value;
        if d == 0 {
            if started {
                pending_zero = true;
            }
            continue;
        }
        if pending_zero {
            out.push_str("零");
            pending_zero = false;
        }
        out.push_str(ZH_DIGITS[d as usize]);
        out.push_str(name);
        started = true;
    }
    if n >= 10_000 {
        let mut head = format!("{}万", zh_cardinal(n / 10_000));
        if n % 10_000 != 0 && n % 10_000 < 1000 {
            head.push_str("零");
        }
        return head + &out;
    }
    out
}

/// `第` followed by the Chinese numeral.
#[derive(Clone, Copy, Debug, Default)]
pub struct ChineseOrdinal;

impl OrdinalFormatter for ChineseOrdinal {
    fn ordinal(&self, n: u32) -> String {
        format!("第{}", zh_cardinal(n))
    }
}

/// Caption for a numbered class label, e.g. for class 984:
/// `这是第九百八十四类针筒的图片`.
pub fn class_caption(class_number: u32, label: &str, lang: &str) -> String {
    match lang {
        "zh" => format!("这是{}类{label}的图片", ChineseOrdinal.ordinal(class_number)),
        _ => format!(
            "This is the {} class images of {label}",
            EnglishOrdinal.ordinal(class_number)
        ),
    }
}

/// Whitespace-collapsed, lowercased caption used for duplicate detection.
pub fn normalize_caption(caption: &str) -> String {
    caption.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn dedup_key(r: &PairRecord) -> (String, String) {
    (
        r.image_hash.clone().unwrap_or_else(|| r.image.clone()),
        normalize_caption(&r.caption),
    )
}

pub struct Pipeline<'a> {
    pub text_rules: TextRules,
    pub scorer: &'a dyn PerplexityScorer,
    pub charset: &'a dyn CharsetRatio,
    pub detectors: Vec<&'a dyn ImageDetector>,
    pub default_lang: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub kept: usize,
    pub rejected: usize,
    pub quarantined: usize,
    /// Rejections counted under their first reason; sums to `rejected`.
    pub by_reason: BTreeMap<String, usize>,
    /// Every reason attached to any rejection.
    pub reason_mentions: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum Outcome {
    Keep,
    Reject { reasons: Vec<Reason> },
    Quarantine { why: String },
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOutput {
    pub kept: Vec<PairRecord>,
    pub rejected: Vec<(PairRecord, Vec<Reason>)>,
    pub quarantined: Vec<(PairRecord, String)>,
    pub stats: FilterStats,
}

impl<'a> Pipeline<'a> {
    pub fn new(scorer: &'a dyn PerplexityScorer, charset: &'a dyn CharsetRatio) -> Self {
        Self {
            text_rules: TextRules::default(),
            scorer,
            charset,
            detectors: Vec::new(),
            default_lang: "en".into(),
        }
    }

    /// Judges one record in isolation (everything except duplicates).
    pub fn judge(&self, r: &PairRecord) -> Judgement {
        let lang = r.lang.as_deref().unwrap_or(&self.default_lang);
        let mut verdict = filter_text(&r.caption, lang, r.perplexity, self.scorer, self.charset, &self.text_rules)?;
        verdict.merge(filter_image(r.width, r.height)?);
        if let (Some(t), Some(i)) = (&r.text_emb, &r.image_emb) {
            verdict.merge(filter_pair(t, i)?);
        }
        for d in &self.detectors {
            if d.flags(r).map_err(|e| Quarantine(format!("detector: {e}")))? {
                verdict.merge(FilterVerdict::from_reasons(vec![Reason::Detector]));
            }
        }
        Ok(verdict)
    }

    /// Streams records in order; the first copy of a duplicate pair wins.
    pub fn run<I>(&self, records: I) -> PipelineOutput
    where
        I: IntoIterator<Item = PairRecord>,
    {
        let mut out = PipelineOutput::default();
        let mut seen = HashSet::new();
        for mut r in records {
            out.stats.input += 1;
            match self.judge(&r) {
                Err(Quarantine(why)) => out.quarantined.push((r, why)),
                Ok(v) if !v.keep => out.rejected.push((r, v.reasons)),
                Ok(_) => {
                    if seen.insert(dedup_key(&r)) {
                        let lang = r.lang.as_deref().unwrap_or(&self.default_lang);
                        r.prompt = Some(template_prompt(r.caption.trim(), lang));
                        out.kept.push(r);
                    } else {
                        out.rejected.push((r, vec![Reason::Duplicate]));
                    }
                }
            }
        }
        out.stats.kept = out.kept.len();
        out.stats.rejected = out.rejected.len();
        out.stats.quarantined = out.quarantined.len();
        for (_, reasons) in &out.rejected {
            *out.stats.by_reason.entry(reasons[0].as_str().into()).or_default() += 1;
            for r in reasons {
                *out.stats.reason_mentions.entry(r.as_str().into()).or_default() += 1;
            }
        }
        out
    }
}

pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("manifest line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(mut w: W, records: &[PairRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct QuarantineLine<'a> {
    #[serde(flatten)]
    record: &'a PairRecord,
    quarantine: &'a str,
}

pub fn write_quarantine<W: Write>(mut w: W, items: &[(PairRecord, String)]) -> Result<()> {
    for (record, why) in items {
        serde_json::to_writer(&mut w, &QuarantineLine { record, quarantine: why })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

const SYNTH_SUBJECTS: &[&str] = &[
    "a red circle on a white table",
    "two dogs playing in the snow",
    "a bowl of fresh strawberries",
    "the old lighthouse at sunset",
    "a child flying a kite",
    "mountains behind a quiet lake",
];
const SYNTH_ZH: &[&str] = &["一只在草地上奔跑的小狗", "夕阳下的古老灯塔", "桌子上的一碗草莓"];
const SYNTH_NOISE: &[&str] = &["IMG_2041.jpg", "click for more", "abc", "photo 17", "cat"];

/// Seeded mix of clean, rejectable, duplicate and unjudgeable records.
pub fn synthetic_manifest(n: usize, seed: u64) -> Vec<PairRecord> {
    let mut rng = tecswin_tensor::Rng::new(seed);
    let mut out: Vec<PairRecord> = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && rng.bernoulli(0.05) {
            let mut dup = out[rng.below(out.len())].clone();
            dup.caption = format!("  {}", dup.caption.to_uppercase());
            out.push(dup);
            continue;
        }
        let zh = rng.bernoulli(0.2);
        let caption = if rng.bernoulli(0.15) {
            SYNTH_NOISE[rng.below(SYNTH_NOISE.len())].to_string()
        } else if zh {
            format!("{}{}", SYNTH_ZH[rng.below(SYNTH_ZH.len())], i)
        } else {
            format!("{} number {i}", SYNTH_SUBJECTS[rng.below(SYNTH_SUBJECTS.len())])
        };
        let side = |rng: &mut tecswin_tensor::Rng| 32 + rng.below(200) as u32;
        let (width, height) = if rng.bernoulli(0.03) {
            (None, None)
        } else {
            (Some(side(&mut rng)), Some(side(&mut rng)))
        };
        let text_emb: Vec<f32> = rng.normal_vec(8, 1.0);
        let image_emb: Vec<f32> = if rng.bernoulli(0.02) {
            vec![0.0; 8]
        } else {
            let mix = rng.uniform() as f32;
            let other = rng.normal_vec(8, 1.0);
            text_emb.iter().zip(other).map(|(t, o)| mix * t + (1.0 - mix) * o).collect()
        };
        out.push(PairRecord {
            image: format!("images/{i:05}.png"),
            width,
            height,
            caption,
            lang: Some(if zh { "zh" } else { "en" }.to_string()),
            text_emb: Some(text_emb),
            image_emb: Some(image_emb),
            perplexity: rng.bernoulli(0.5).then(|| 2.0 + 6.0 * rng.uniform()),
            image_hash: Some(format!("{:016x}", splitmix64(seed ^ i as u64))),
            prompt: None,
        });
    }
    out
}
