//! Synthetic multilingual transduction corpora.
//!
//! Every language is a substitution cipher over a fixed 40-symbol alphabet.
//! A target is a clean sequence of alphabet words; its source is the
//! per-token cipher image with random replacement noise. The out-of-domain
//! split draws longer and noisier sequences than the in-domain one.
//!
//! Each pair is a pure function of `(language seed, domain, index)`, and the
//! corpus roles own disjoint index ranges, so corpora never need storing.

use crate::error::{contract, Error, Result};
use crate::model::config::{ModelConfig, BOS, EOS, N_SPECIAL, PAD};
use crate::model::FfnVariant;
use crate::rng::{key, mix64};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

const CONSONANTS: [&str; 10] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r"];
const VOWELS: [&str; 4] = ["a", "e", "i", "o"];
pub const ALPHABET_SIZE: usize = CONSONANTS.len() * VOWELS.len();

/// Spelled-out alphabet symbols ("ba", "be", …), index order.
pub fn alphabet() -> Vec<String> {
    CONSONANTS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect()
}

fn str_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    In,
    Out,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::In => "in",
            Domain::Out => "out",
        }
    }
}

/// Noise and length settings of both domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainParams {
    pub noise_rate_in: f64,
    pub noise_rate_out: f64,
    /// Inclusive target length bounds.
    pub length_range_in: (usize, usize),
    pub length_range_out: (usize, usize),
}

impl Default for DomainParams {
    fn default() -> Self {
        Self {
            noise_rate_in: 0.15,
            noise_rate_out: 0.25,
            length_range_in: (3, 10),
            length_range_out: (10, 20),
        }
    }
}

impl DomainParams {
    pub fn validate(&self) -> Result<()> {
        for r in [self.noise_rate_in, self.noise_rate_out] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("noise rate {r} outside [0, 1]")));
            }
        }
        for (lo, hi) in [self.length_range_in, self.length_range_out] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("invalid length range ({lo}, {hi})")));
            }
        }
        if self.mean_length(Domain::Out) <= self.mean_length(Domain::In) {
            return Err(Error::Config("out-of-domain sequences must be longer on average".into()));
        }
        Ok(())
    }

    pub fn mean_length(&self, domain: Domain) -> f64 {
        let (lo, hi) = self.range(domain);
        (lo + hi) as f64 / 2.0
    }

    pub fn range(&self, domain: Domain) -> (usize, usize) {
        match domain {
            Domain::In => self.length_range_in,
            Domain::Out => self.length_range_out,
        }
    }

    pub fn noise(&self, domain: Domain) -> f64 {
        match domain {
            Domain::In => self.noise_rate_in,
            Domain::Out => self.noise_rate_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub language: String,
    pub seed: u64,
    /// `table[clean symbol] = cipher symbol`.
    pub table: Vec<usize>,
    pub noise_rate_in: f64,
    pub noise_rate_out: f64,
    pub length_range_in: (usize, usize),
    pub length_range_out: (usize, usize),
}

fn permutation(seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t: Vec<usize> = (0..ALPHABET_SIZE).collect();
    loop {
        t.shuffle(&mut rng);
        if t.iter().enumerate().any(|(i, &s)| i != s) {
            return t;
        }
    }
}

/// Deterministic spec with the default domain settings.
pub fn make_language_spec(language: &str, seed: u64) -> LanguageSpec {
    make_language_spec_with(language, seed, &DomainParams::default())
}

pub fn make_language_spec_with(language: &str, seed: u64, params: &DomainParams) -> LanguageSpec {
    LanguageSpec {
        language: language.to_string(),
        seed,
        table: permutation(key(&[seed, str_key(language)])),
        noise_rate_in: params.noise_rate_in,
        noise_rate_out: params.noise_rate_out,
        length_range_in: params.length_range_in,
        length_range_out: params.length_range_out,
    }
}

/// Specs for several languages from one base seed. A table equal to an
/// earlier one is re-rolled with the next seed.
pub fn make_language_set(languages: &[String], base_seed: u64, params: &DomainParams) -> Vec<LanguageSpec> {
    let mut out: Vec<LanguageSpec> = Vec::with_capacity(languages.len());
    for (i, l) in languages.iter().enumerate() {
        let mut seed = key(&[base_seed, i as u64]);
        let mut spec = make_language_spec_with(l, seed, params);
        while out.iter().any(|o| o.table == spec.table) {
            seed = mix64(seed);
            spec = make_language_spec_with(l, seed, params);
        }
        out.push(spec);
    }
    out
}

impl LanguageSpec {
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.table.len()];
        for (i, &s) in self.table.iter().enumerate() {
            inv[s] = i;
        }
        inv
    }

    pub fn domain_params(&self) -> DomainParams {
        DomainParams {
            noise_rate_in: self.noise_rate_in,
            noise_rate_out: self.noise_rate_out,
            length_range_in: self.length_range_in,
            length_range_out: self.length_range_out,
        }
    }

    /// Applies the inverse table token by token.
    pub fn decipher(&self, source: &[usize]) -> Vec<usize> {
        let inv = self.inverse();
        source.iter().map(|&s| inv[s]).collect()
    }
}

/// One pair: cipher symbols on the source side, alphabet symbols on the
/// target side (both as alphabet indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn generate_pair(spec: &LanguageSpec, domain: Domain, index: u64) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(key(&[spec.seed, domain as u64 + 1, index]));
    let params = spec.domain_params();
    let (lo, hi) = params.range(domain);
    let noise = params.noise(domain);
    let len = rng.gen_range(lo..=hi);
    let target: Vec<usize> = (0..len).map(|_| rng.gen_range(0..ALPHABET_SIZE)).collect();
    let source = target
        .iter()
        .map(|&t| {
            if rng.gen::<f64>() < noise {
                rng.gen_range(0..ALPHABET_SIZE)
            } else {
                spec.table[t]
            }
        })
        .collect();
    Pair { source, target }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Pretrain,
    Finetune,
    Validation,
    TestIn,
    TestOut,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Pretrain, Role::Finetune, Role::Validation, Role::TestIn, Role::TestOut];

    pub fn name(self) -> &'static str {
        match self {
            Role::Pretrain => "pretrain",
            Role::Finetune => "finetune",
            Role::Validation => "validation",
            Role::TestIn => "test_in",
            Role::TestOut => "test_out",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub language: String,
    pub domain: Domain,
    pub index: u64,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub role: Role,
    pub examples: Vec<Example>,
}

impl CorpusSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn for_language(&self, language: &str) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.language == language).collect()
    }

    /// Tab-separated export: language, domain, source symbols, target words.
    pub fn to_tsv(&self) -> String {
        let abc = alphabet();
        let mut s = String::new();
        for e in &self.examples {
            let src: Vec<&str> = e.source.iter().map(|&i| abc[i].as_str()).collect();
            let tgt: Vec<&str> = e.target.iter().map(|&i| abc[i].as_str()).collect();
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.language, e.domain.name(), src.join(" "), tgt.join(" "));
        }
        s
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// Pair counts of one language per role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSizes {
    pub pretrain: usize,
    pub finetune: usize,
    pub validation: usize,
    pub test_in: usize,
    pub test_out: usize,
}

impl RoleSizes {
    pub fn get(&self, role: Role) -> usize {
        match role {
            Role::Pretrain => self.pretrain,
            Role::Finetune => self.finetune,
            Role::Validation => self.validation,
            Role::TestIn => self.test_in,
            Role::TestOut => self.test_out,
        }
    }
}

/// What to generate: per-language sizes, role index ranges and the share
/// of out-of-domain pairs inside the pretraining mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPlan {
    pub sizes: BTreeMap<String, RoleSizes>,
    /// First pair index of each role.
    pub role_offsets: BTreeMap<Role, u64>,
    pub pretrain_out_fraction: f64,
}

pub const ROLE_STRIDE: u64 = 1 << 32;

impl CorpusPlan {
    pub fn new(sizes: BTreeMap<String, RoleSizes>, pretrain_out_fraction: f64) -> Self {
        let role_offsets = Role::ALL.iter().enumerate().map(|(i, &r)| (r, i as u64 * ROLE_STRIDE)).collect();
        Self {
            sizes,
            role_offsets,
            pretrain_out_fraction,
        }
    }

    /// High-resource languages get `high` pretraining pairs, `low_language`
    /// gets `low`; every language gets the same evaluation sizes.
    pub fn resource_skewed(
        languages: &[String],
        low_language: &str,
        high: usize,
        low: usize,
        finetune: usize,
        validation: usize,
        test: usize,
        pretrain_out_fraction: f64,
    ) -> Self {
        let sizes = languages
            .iter()
            .map(|l| {
                let pretrain = if l == low_language { low } else { high };
                (
                    l.clone(),
                    RoleSizes {
                        pretrain,
                        finetune,
                        validation,
                        test_in: test,
                        test_out: test,
                    },
                )
            })
            .collect();
        Self::new(sizes, pretrain_out_fraction)
    }

    fn max_count(&self, role: Role) -> u64 {
        self.sizes.values().map(|s| s.get(role) as u64).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return contract("corpus plan names no language");
        }
        if !(0.0..=1.0).contains(&self.pretrain_out_fraction) {
            return contract(format!(
                "pretrain out-of-domain fraction {} outside [0, 1]",
                self.pretrain_out_fraction
            ));
        }
        let mut ranges = Vec::new();
        for role in Role::ALL {
            let start = *self
                .role_offsets
                .get(&role)
                .ok_or_else(|| Error::Contract(format!("no index offset for role {}", role.name())))?;
            let end = start
                .checked_add(self.max_count(role))
                .ok_or_else(|| Error::Contract(format!("index range of role {} overflows", role.name())))?;
            ranges.push((start, end, role));
        }
        ranges.sort();
        for w in ranges.windows(2) {
            let ((_, end, a), (start, _, b)) = (w[0], w[1]);
            if end > start {
                return contract(format!(
                    "index ranges of roles {} and {} overlap",
                    a.name(),
                    b.name()
                ));
            }
        }
        Ok(())
    }

    fn domain_of(&self, role: Role, i: usize, count: usize) -> Domain {
        match role {
            Role::Pretrain => {
                let n_out = (count as f64 * self.pretrain_out_fraction).round() as usize;
                if i >= count - n_out {
                    Domain::Out
                } else {
                    Domain::In
                }
            }
            Role::TestOut => Domain::Out,
            _ => Domain::In,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub splits: BTreeMap<Role, CorpusSplit>,
}

impl Corpus {
    pub fn split(&self, role: Role) -> &CorpusSplit {
        &self.splits[&role]
    }

    /// Fraction of the pretraining mix that belongs to `language`.
    pub fn pretrain_share(&self, language: &str) -> f64 {
        let s = self.split(Role::Pretrain);
        s.for_language(language).len() as f64 / s.len().max(1) as f64
    }
}

pub fn build_corpus(specs: &[LanguageSpec], plan: &CorpusPlan) -> Result<Corpus> {
    plan.validate()?;
    let mut splits = BTreeMap::new();
    for role in Role::ALL {
        let mut examples = Vec::new();
        for spec in specs {
            let Some(sizes) = plan.sizes.get(&spec.language) else {
                continue;
            };
            let count = sizes.get(role);
            let offset = plan.role_offsets[&role];
            for i in 0..count {
                let domain = plan.domain_of(role, i, count);
                let index = offset + i as u64;
                let p = generate_pair(spec, domain, index);
                examples.push(Example {
                    language: spec.language.clone(),
                    domain,
                    index,
                    source: p.source,
                    target: p.target,
                });
            }
        }
        splits.insert(role, CorpusSplit { role, examples });
    }
    if let Some(missing) = plan.sizes.keys().find(|l| !specs.iter().any(|s| &s.language == *l)) {
        return contract(format!("corpus plan names language {missing} without a spec"));
    }
    Ok(Corpus { splits })
}

/// Shared vocabulary: reserved ids, one tag per language, then the alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub languages: Vec<String>,
    pub symbols: Vec<String>,
}

impl Vocab {
    pub fn new(languages: &[String]) -> Self {
        Self {
            languages: languages.to_vec(),
            symbols: alphabet(),
        }
    }

    pub fn size(&self) -> usize {
        self.content_offset() + self.symbols.len()
    }

    pub fn content_offset(&self) -> usize {
        N_SPECIAL + self.languages.len()
    }

    pub fn tag_token(language: &str) -> String {
        format!("<{language}>")
    }

    pub fn tag_id(&self, language: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == language).map(|i| N_SPECIAL + i)
    }

    /// Alphabet indices to model ids.
    pub fn encode_symbols(&self, symbols: &[usize]) -> Vec<usize> {
        symbols.iter().map(|&s| self.content_offset() + s).collect()
    }

    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                let w = w.as_ref();
                if let Some(i) = self.symbols.iter().position(|s| s == w) {
                    return Ok(self.content_offset() + i);
                }
                if let Some(l) = w.strip_prefix('<').and_then(|r| r.strip_suffix('>')) {
                    if let Some(id) = self.tag_id(l) {
                        return Ok(id);
                    }
                }
                Err(Error::Encoding(format!("symbol {w:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| match id {
                PAD | BOS | EOS => Err(Error::Encoding(format!("reserved id {id} has no surface form"))),
                _ if id < self.content_offset() => Ok(Self::tag_token(&self.languages[id - N_SPECIAL])),
                _ if id < self.size() => Ok(self.symbols[id - self.content_offset()].clone()),
                _ => Err(Error::Encoding(format!("id {id} outside a vocabulary of {}", self.size()))),
            })
            .collect()
    }

    /// Surface text of content ids, skipping anything reserved.
    pub fn text(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= self.content_offset() && id < self.size())
            .map(|&id| self.symbols[id - self.content_offset()].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn model_config(
        &self,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        n_enc_layers: usize,
        n_dec_layers: usize,
        max_seq_len: usize,
    ) -> ModelConfig {
        ModelConfig {
            d_model,
            n_heads,
            d_ff,
            n_enc_layers,
            n_dec_layers,
            vocab_size: self.size(),
            max_seq_len,
            language_ids: self.languages.clone(),
            ffn_variant: FfnVariant::Dense,
            lora_rank: 16,
            lora_alpha: 32.0,
        }
    }
}

/// Default language ids `l0 … l{n-1}`.
pub fn language_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("l{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langs() -> Vec<String> {
        language_ids(3)
    }

    #[test]
    fn alphabet_is_forty_distinct_words() {
        let a = alphabet();
        assert_eq!(a.len(), ALPHABET_SIZE);
        let set: std::collections::BTreeSet<_> = a.iter().collect();
        assert_eq!(set.len(), 40);
    }

    #[test]
    fn spec_is_deterministic_and_bijective() {
        let a = make_language_spec("l1", 7);
        assert_eq!(a, make_language_spec("l1", 7));
        let inv = a.inverse();
        for i in 0..ALPHABET_SIZE {
            assert_eq!(inv[a.table[i]], i);
            assert_eq!(a.table[inv[i]], i);
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_tables() {
        let a = make_language_spec("l1", 1);
        let b = make_language_spec("l1", 2);
        assert!(a.table.iter().zip(&b.table).any(|(x, y)| x != y));
    }

    #[test]
    fn language_set_has_no_repeated_table() {
        let specs = make_language_set(&language_ids(8), 3, &DomainParams::default());
        for i in 0..specs.len() {
            for j in 0..i {
                assert_ne!(specs[i].table, specs[j].table);
            }
        }
    }

    #[test]
    fn noiseless_source_deciphers_to_target() {
        let p = DomainParams {
            noise_rate_in: 0.0,
            ..DomainParams::default()
        };
        let s = make_language_spec_with("l0", 11, &p);
        for i in 0..200 {
            let pair = generate_pair(&s, Domain::In, i);
            assert_eq!(s.decipher(&pair.source), pair.target);
        }
    }

    #[test]
    fn pair_is_deterministic() {
        let s = make_language_spec("l0", 5);
        assert_eq!(generate_pair(&s, Domain::Out, 42), generate_pair(&s, Domain::Out, 42));
        assert_ne!(generate_pair(&s, Domain::Out, 42), generate_pair(&s, Domain::In, 42));
    }

    #[test]
    fn overlapping_roles_rejected() {
        let mut plan = CorpusPlan::resource_skewed(&langs(), "l2", 10, 2, 5, 5, 5, 0.3);
        plan.role_offsets.insert(Role::Finetune, 3);
        assert!(matches!(plan.validate(), Err(Error::Contract(_))));
    }

    #[test]
    fn counts_match_plan() {
        let specs = make_language_set(&langs(), 1, &DomainParams::default());
        let plan = CorpusPlan::resource_skewed(&langs(), "l2", 10, 2, 5, 4, 3, 0.5);
        let c = build_corpus(&specs, &plan).unwrap();
        for l in langs() {
            let want = plan.sizes[&l];
            for role in Role::ALL {
                assert_eq!(c.split(role).for_language(&l).len(), want.get(role));
            }
        }
        assert!(c.split(Role::TestOut).examples.iter().all(|e| e.domain == Domain::Out));
        assert!(c.split(Role::Validation).examples.iter().all(|e| e.domain == Domain::In));
        let pre = c.split(Role::Pretrain).for_language("l0");
        assert_eq!(pre.iter().filter(|e| e.domain == Domain::Out).count(), 5);
    }

    #[test]
    fn tokenize_round_trip_and_tags() {
        let v = Vocab::new(&langs());
        let words = ["ba", "ro", "ki"];
        let ids = v.tokenize(&words).unwrap();
        assert!(ids.iter().all(|&i| i >= v.content_offset()));
        assert_eq!(v.detokenize(&ids).unwrap(), words);
        for (i, l) in langs().iter().enumerate() {
            assert_eq!(v.tokenize(&[Vocab::tag_token(l)]).unwrap(), vec![N_SPECIAL + i]);
        }
        let empty: [&str; 0] = [];
        assert!(v.tokenize(&empty).unwrap().is_empty());
        assert!(matches!(v.tokenize(&["zz"]), Err(Error::Encoding(_))));
        assert!(matches!(v.detokenize(&[EOS]), Err(Error::Encoding(_))));
    }

    #[test]
    fn tsv_has_four_fields() {
        let specs = make_language_set(&langs(), 1, &DomainParams::default());
        let plan = CorpusPlan::resource_skewed(&langs(), "l2", 2, 1, 1, 1, 1, 0.0);
        let c = build_corpus(&specs, &plan).unwrap();
        let tsv = c.split(Role::TestOut).to_tsv();
        assert_eq!(tsv.lines().count(), 3);
        assert!(tsv.lines().all(|l| l.split('\t').count() == 4));
    }
}
