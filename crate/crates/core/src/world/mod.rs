//! Synthetic scenes, bilingual captions and queries, and oracle calls.
//!
//! Everything here is a pure function of a seed, so any example can be
//! regenerated and checked against its ground truth.

mod dataset;
mod render;
mod templates;

pub use dataset::{
    build_datasets, caption_pairs, lm_texts, read_jsonl, split_of, task_seed, tasks, write_jsonl,
    DatasetConfig, DatasetManifest, PairRecord, Purpose, TaskRecord, TextRecord,
};
pub use render::{glyph, render, GLYPH};
pub use templates::{templates, TemplateTable, TEMPLATE_SOURCE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{validate, FunctionRef, RawCall};
use crate::numerics::{Rng, SeedStream};
use crate::registry::{ArgValue, FunctionalCall, ParamKind, Registry};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXEL_BYTES: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
pub const MAX_COUNT: u8 = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorldError {
    #[error("invalid object: {0}")]
    InvalidObject(String),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("function `{0}` is not in the registry")]
    UnknownFunction(String),
    #[error("oracle call failed validation: {0}")]
    InvalidOracle(String),
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("io: {0}")]
    IoFailure(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    WaterBottle,
    ComputerMouse,
    Pineapple,
    Dog,
    Cat,
    Dishwasher,
    FoodPlate,
    LivingRoom,
    Landmark,
    LetterDoc,
    Apple,
    Banana,
}

impl Category {
    pub const ALL: [Category; 12] = [
        Category::WaterBottle,
        Category::ComputerMouse,
        Category::Pineapple,
        Category::Dog,
        Category::Cat,
        Category::Dishwasher,
        Category::FoodPlate,
        Category::LivingRoom,
        Category::Landmark,
        Category::LetterDoc,
        Category::Apple,
        Category::Banana,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        [
            "water_bottle",
            "computer_mouse",
            "pineapple",
            "dog",
            "cat",
            "dishwasher",
            "food_plate",
            "living_room",
            "landmark",
            "letter_doc",
            "apple",
            "banana",
        ][self.index()]
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::White,
        Color::Black,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["red", "green", "blue", "yellow", "white", "black"][self.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Zh,
}

impl Language {
    pub fn code(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Zh => "zh",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub category: Category,
    pub color: Color,
    pub count: u8,
}

impl ObjectSpec {
    pub fn check(&self) -> Result<(), WorldError> {
        if !(1..=MAX_COUNT).contains(&self.count) {
            return Err(WorldError::InvalidObject(format!(
                "count {} outside 1..={MAX_COUNT}",
                self.count
            )));
        }
        Ok(())
    }

    fn random(rng: &mut Rng, category: Category) -> Self {
        let color = Color::ALL[rng.below(Color::ALL.len())];
        let count = 1 + rng.below(usize::from(MAX_COUNT)) as u8;
        Self {
            category,
            color,
            count,
        }
    }
}

/// A rendered scene. `objects[0]` is the subject and sits in the upper half;
/// a second object, if any, sits in the lower half.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<ObjectSpec>,
    /// Row-major 32×32×3 bytes.
    pub pixels: Vec<u8>,
    pub seed: u64,
}

impl Scene {
    pub fn new(objects: Vec<ObjectSpec>, seed: u64) -> Result<Self, WorldError> {
        let pixels = render(&objects, seed)?;
        Ok(Self {
            objects,
            pixels,
            seed,
        })
    }

    pub fn subject(&self) -> &ObjectSpec {
        &self.objects[0]
    }

    /// Pixels scaled to [0, 1], the layout the image encoder expects.
    pub fn pixels_f32(&self) -> Vec<f32> {
        pixels_to_f32(&self.pixels)
    }
}

pub fn pixels_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| f32::from(b) / 255.0).collect()
}

fn draw_objects(rng: &mut Rng) -> Vec<ObjectSpec> {
    let first = Category::ALL[rng.below(Category::ALL.len())];
    let mut objects = vec![ObjectSpec::random(rng, first)];
    if rng.below(2) == 1 {
        let mut second = Category::ALL[rng.below(Category::ALL.len() - 1)];
        if second >= first {
            second = Category::ALL[second.index() + 1];
        }
        objects.push(ObjectSpec::random(rng, second));
    }
    objects
}

/// One or two objects of distinct categories, drawn uniformly from the catalog.
pub fn generate_scene(seed: u64) -> Scene {
    let mut rng = Rng::new(seed, SeedStream::Data);
    let objects = draw_objects(&mut rng);
    Scene::new(objects, seed).expect("drawn objects are valid")
}

fn object_phrase(o: &ObjectSpec, language: Language) -> String {
    let t = templates();
    let c = t.category(o.category);
    let n = usize::from(o.count) - 1;
    match language {
        Language::En => {
            let noun = if o.count == 1 { &c.singular } else { &c.plural };
            format!("{} {} {}", t.counts.en[n], o.color.name(), noun)
        }
        Language::Zh => format!(
            "{}{}{}的{}",
            t.counts.zh[n],
            c.measure,
            t.color(o.color).zh,
            c.zh
        ),
    }
}

/// Template description of a list of objects, e.g. "two yellow pineapples on a table".
pub fn describe(objects: &[ObjectSpec], language: Language) -> String {
    let t = templates();
    let setting = t.category(objects[0].category);
    let phrases: Vec<String> = objects.iter().map(|o| object_phrase(o, language)).collect();
    match language {
        Language::En => format!("{} {}", phrases.join(" and "), setting.setting),
        Language::Zh => format!("{}有{}", setting.setting_zh, phrases.join("和")),
    }
}

pub fn caption(scene: &Scene, language: Language) -> String {
    describe(&scene.objects, language)
}

/// Every free choice behind a task; [`build_task`] turns it into an example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub function: String,
    pub subject: ObjectSpec,
    pub distractor: Option<ObjectSpec>,
    pub language: Language,
    /// Index into the function's intents (e.g. the care type).
    pub intent: usize,
    /// Index into the intent's query templates for `language`.
    pub template: usize,
    pub contact: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskExample {
    pub scene: Scene,
    pub query: String,
    pub language: Language,
    pub target_call: FunctionalCall,
    pub split: Split,
}

impl TaskExample {
    pub fn function(&self) -> &str {
        self.target_call.name()
    }
}

fn fill(template: &str, slots: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in slots {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Builds the query and oracle call for a fully specified task.
pub fn build_task(
    spec: &TaskSpec,
    scene_seed: u64,
    registry: &Registry,
) -> Result<TaskExample, WorldError> {
    let t = templates();
    let f = t
        .function(&spec.function)
        .ok_or_else(|| WorldError::InvalidSpec(format!("no templates for `{}`", spec.function)))?;
    if !f.categories.contains(&spec.subject.category) {
        return Err(WorldError::InvalidSpec(format!(
            "{} does not fit {}",
            spec.subject.category.name(),
            f.name
        )));
    }
    let intent = f
        .intents
        .get(spec.intent)
        .ok_or_else(|| WorldError::InvalidSpec(format!("intent {}", spec.intent)))?;
    let queries = match spec.language {
        Language::En => &intent.en,
        Language::Zh => &intent.zh,
    };
    let query_template = queries
        .get(spec.template)
        .ok_or_else(|| WorldError::InvalidSpec(format!("template {}", spec.template)))?;
    let (index, schema) = registry
        .lookup(spec.function.as_str())
        .map_err(|_| WorldError::UnknownFunction(spec.function.clone()))?;

    let mut objects = vec![spec.subject];
    objects.extend(spec.distractor);
    for o in &objects {
        o.check()?;
    }
    if objects.len() == 2 && objects[0].category == objects[1].category {
        return Err(WorldError::InvalidSpec(
            "distractor repeats the subject category".into(),
        ));
    }
    let scene = Scene::new(objects, scene_seed)?;

    let s = spec.subject;
    let c = t.category(s.category);
    let n = usize::from(s.count) - 1;
    let pick = |list: &[String]| list[spec.contact % list.len()].clone();
    let mut title = c.singular.clone();
    title[..1].make_ascii_uppercase();
    let slots = [
        ("caption", describe(&[s], Language::En)),
        ("phrase", object_phrase(&s, Language::En)),
        ("singular", c.singular.clone()),
        ("title", title),
        ("color", s.color.name().to_string()),
        ("count", s.count.to_string()),
        (
            "value",
            f.values.get(&s.category).cloned().unwrap_or_default(),
        ),
        ("option", intent.option.clone()),
        ("phone", pick(&t.phones)),
        ("email", pick(&t.emails)),
        ("address", pick(&t.addresses)),
        (
            "count_word",
            match spec.language {
                Language::En => t.counts.en[n].clone(),
                Language::Zh => t.counts.zh[n].clone(),
            },
        ),
        ("measure", c.measure.clone()),
    ];

    let mut args = Vec::with_capacity(f.args.len());
    for (a, p) in f.args.iter().zip(&schema.params) {
        let text = fill(a, &slots);
        args.push(match p.kind {
            ParamKind::Integer => ArgValue::Int(text.parse().map_err(|_| {
                WorldError::InvalidOracle(format!("`{text}` is not an integer for {}", p.name))
            })?),
            _ => ArgValue::Str(text),
        });
    }
    let raw = RawCall {
        function: FunctionRef::Index(index),
        args,
    };
    let report = validate(&raw, registry);
    if !report.ok {
        return Err(WorldError::InvalidOracle(report.to_string()));
    }
    Ok(TaskExample {
        scene,
        query: fill(query_template, &slots),
        language: spec.language,
        target_call: FunctionalCall {
            schema: schema.clone(),
            args: raw.args,
        },
        split: split_of(scene_seed),
    })
}

/// Draws a task: the function uniformly over the registry, then a compatible
/// subject, an optional distractor, the language, and the query template.
pub fn sample_task_spec(seed: u64, registry: &Registry) -> Result<TaskSpec, WorldError> {
    let t = templates();
    let mut rng = Rng::new(seed, SeedStream::Data);
    let schema = registry
        .schema(rng.below(registry.len().max(1)))
        .ok_or_else(|| WorldError::InvalidSpec("empty registry".into()))?;
    let f = t
        .function(&schema.name)
        .ok_or_else(|| WorldError::UnknownFunction(schema.name.clone()))?;
    let category = f.categories[rng.below(f.categories.len())];
    let subject = ObjectSpec::random(&mut rng, category);
    let distractor = if rng.uniform() < DISTRACTOR_RATE {
        let others: Vec<Category> = Category::ALL
            .into_iter()
            .filter(|&c| c != category)
            .collect();
        let other = others[rng.below(others.len())];
        Some(ObjectSpec::random(&mut rng, other))
    } else {
        None
    };
    let language = if rng.below(2) == 0 {
        Language::En
    } else {
        Language::Zh
    };
    let intent = rng.below(f.intents.len());
    let n_templates = match language {
        Language::En => f.intents[intent].en.len(),
        Language::Zh => f.intents[intent].zh.len(),
    };
    let template = rng.below(n_templates);
    let contact = rng.below(CONTACT_CHOICES);
    Ok(TaskSpec {
        function: schema.name.clone(),
        subject,
        distractor,
        language,
        intent,
        template,
        contact,
    })
}

/// Fraction of task scenes carrying a second, irrelevant object.
pub const DISTRACTOR_RATE: f32 = 0.25;
const CONTACT_CHOICES: usize = 60;

pub fn generate_task(seed: u64, registry: &Registry) -> Result<TaskExample, WorldError> {
    build_task(&sample_task_spec(seed, registry)?, seed, registry)
}
