//! Synthetic dataset for offline runs: articles with latent quality, two
//! gold standards, a few-shot pool, a system prompt and a mock-mode config.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::io::write_atomic;
use crate::seed;

pub const SYSTEM_PROMPT: &str = include_str!("../assets/system_prompt.txt");

const TOPICS: &[&str] = &[
    "cardiac rehabilitation", "childhood asthma", "antibiotic stewardship", "hip fracture recovery",
    "maternal nutrition", "sleep quality", "tuberculosis screening", "diabetic retinopathy",
    "hospital readmission", "vaccine uptake", "chronic pain", "stroke prevention",
    "gut microbiota", "kidney function", "depression in adolescents", "air pollution exposure",
];
const METHODS: &[&str] = &[
    "a randomised controlled trial", "a prospective cohort study", "a systematic review",
    "a cross-sectional survey", "a qualitative interview study", "a mixed-methods evaluation",
    "a registry-based analysis", "a cluster randomised trial", "a modelling study",
];
const FILLER: &[&str] = &[
    "Participants were recruited from primary care practices across several regions.",
    "Outcomes were recorded at baseline and at twelve months.",
    "Analyses adjusted for age, sex and socioeconomic position.",
    "Missing data were handled by multiple imputation.",
    "The intervention was delivered by trained community staff.",
    "Sensitivity analyses gave consistent estimates.",
    "Costs were estimated from the health service perspective.",
    "Follow-up was complete for most participants.",
    "Results were compared against national reference values.",
    "A stakeholder panel reviewed the interpretation of findings.",
    "Effect sizes were modest but clinically relevant.",
    "The protocol was registered before recruitment began.",
];

pub struct DemoSpec {
    pub units: Vec<u8>,
    pub per_unit: usize,
    pub seed: u64,
    pub models: Vec<String>,
}

impl Default for DemoSpec {
    fn default() -> Self {
        Self {
            units: (1..=6).collect(),
            per_unit: 100,
            seed: 20_251_017,
            models: vec!["alpha-chat".into(), "beta-reasoner".into()],
        }
    }
}

fn abstract_text(topic: &str, method: &str, sentences: usize, rng: &mut impl Rng) -> String {
    let mut s = format!("We report {method} of {topic}.");
    for _ in 0..sentences {
        s.push(' ');
        s.push_str(FILLER.choose(rng).expect("non-empty"));
    }
    s.push_str(&format!(" These findings inform future work on {topic}."));
    s
}

fn article_json(id: &str, uoa: u8, doi: Option<&str>, title: &str, abs: &str, star: Option<u8>) -> String {
    let mut v = serde_json::json!({ "id": id, "uoa": uoa, "doi": doi, "title": title, "abstract": abs });
    if let Some(s) = star {
        v["star"] = serde_json::json!(s);
    }
    v.to_string()
}

/// Writes the dataset into `dir` and returns the path of its config file.
pub fn write_demo(dir: &Path, spec: &DemoSpec) -> std::io::Result<PathBuf> {
    let mut rng = seed::rng(spec.seed);
    let noise = Normal::new(0.0, 0.35).expect("finite sd");
    let (mut articles, mut indiv, mut proxy, mut pool) = (String::new(), String::from("article_id,score\n"), String::from("article_id,score\n"), String::new());
    for &u in &spec.units {
        let dept_shift: f64 = rng.gen_range(-0.3..0.3);
        // one article in twenty is ineligible: no DOI or no abstract
        let total = spec.per_unit + spec.per_unit / 20;
        for i in 0..total {
            let id = format!("u{u}-a{i:04}");
            let topic = TOPICS.choose(&mut rng).expect("non-empty");
            let method = METHODS.choose(&mut rng).expect("non-empty");
            let title = format!("{} in {topic}: {}", ["Outcomes", "Determinants", "Costs", "Experiences", "Trends"].choose(&mut rng).expect("non-empty"), method.trim_start_matches("a "));
            let sentences = rng.gen_range(2..9);
            let latent: f64 = rng.gen_range(1.0..4.0);
            let ineligible = i >= spec.per_unit;
            let (doi, abs) = match (ineligible, i % 2) {
                (true, 0) => (None, abstract_text(topic, method, sentences, &mut rng)),
                (true, _) => (Some(format!("10.5555/demo.{id}")), String::new()),
                _ => (Some(format!("10.5555/demo.{id}")), abstract_text(topic, method, sentences, &mut rng)),
            };
            articles.push_str(&article_json(&id, u, doi.as_deref(), &title, &abs, None));
            articles.push('\n');
            let mut g = (latent + noise.sample(&mut rng)).round().clamp(1.0, 4.0);
            if rng.gen_bool(0.03) {
                // two assessors disagreeing by one level
                g = if g < 4.0 { g + 0.5 } else { g - 0.5 };
            }
            indiv.push_str(&format!("{id},{g}\n"));
            let p = (0.4 * latent + 0.6 * (2.6 + dept_shift) + 0.2 * noise.sample(&mut rng)).clamp(1.0, 4.0);
            proxy.push_str(&format!("{id},{:.4}\n", p));
        }
        for star in 1..=4u8 {
            for k in 0..2 {
                let id = format!("ex-u{u}-s{star}-{k}");
                let topic = TOPICS.choose(&mut rng).expect("non-empty");
                let method = METHODS.choose(&mut rng).expect("non-empty");
                let title = format!("Exemplar {star}* study of {topic}");
                let abs = abstract_text(topic, method, 3, &mut rng);
                pool.push_str(&article_json(&id, u, Some(&format!("10.5555/ex.{id}")), &title, &abs, Some(star)));
                pool.push('\n');
            }
        }
    }
    let models: Vec<serde_json::Value> = spec
        .models
        .iter()
        .map(|m| serde_json::json!({ "name": m, "base_url": "http://localhost:8000/v1", "api_key_env": "DEMO_API_KEY" }))
        .collect();
    let config = serde_json::json!({
        "schema_version": 1,
        "articles": "articles.jsonl",
        "gold": [
            { "kind": "departmental_proxy", "path": "gold_proxy.csv" },
            { "kind": "individual", "path": "gold_individual.csv" }
        ],
        "fewshot_pool": "fewshot.jsonl",
        "system_prompt": "system_prompt.txt",
        "output_dir": "run",
        "models": models,
        "strategies": ["zero", "few"],
        "iterations": 5,
        "concurrency": 8,
        "seed": 42,
        "mock": { "enabled": true, "noise_sd": 0.8 }
    });
    let files = [
        ("articles.jsonl", articles),
        ("gold_individual.csv", indiv),
        ("gold_proxy.csv", proxy),
        ("fewshot.jsonl", pool),
        ("system_prompt.txt", SYSTEM_PROMPT.to_string()),
        ("config.json", serde_json::to_string_pretty(&config).expect("json") + "\n"),
    ];
    for (name, body) in files {
        write_atomic(&dir.join(name), body.as_bytes())?;
    }
    Ok(dir.join("config.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    #[test]
    fn demo_inputs_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DemoSpec { per_unit: 40, ..Default::default() };
        let cfg = write_demo(dir.path(), &spec).unwrap();
        let set = corpus::load_articles(dir.path().join("articles.jsonl")).unwrap();
        assert_eq!(set.len(), 6 * 42);
        let eligible = corpus::filter_eligible(&set);
        assert!(eligible.len() < 6 * 40);
        let pool = corpus::load_fewshot_pool(dir.path().join("fewshot.jsonl"), &set).unwrap();
        assert_eq!(pool.len(), 48);
        let c = crate::pipeline::ExperimentConfig::load(&cfg).unwrap();
        c.validate().unwrap();
        crate::promptgen::SystemPromptTemplate::new(SYSTEM_PROMPT).unwrap();
    }
}
