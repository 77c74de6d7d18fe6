//! Synthetic requests, a template plan generator with injected defects, and
//! random plan/mutation generators for exercising the checker.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::correction::{query_prompt, CriticClient, CriticError, CriticRequest, CurationRequest, Material};
use crate::digest::hash_parts;
use crate::media;
use crate::modality::{Extension, Modality};
use crate::plan::{serialize_plan, ArtifactRef, Binding, DiagnosticKind, Plan, PlanStep, StepArgument, TaskType};
use crate::registry::{Expects, ToolLibrary};

const SUBJECTS: &[&str] = &[
    "mountain hiking trip",
    "birthday party",
    "city night skyline",
    "autumn forest walk",
    "beach sunset",
    "wedding ceremony",
    "jazz concert",
    "cooking pasta",
    "rainy street",
    "football match",
    "snowy village",
    "desert road trip",
    "underwater coral reef",
    "spring garden flowers",
    "morning coffee routine",
    "space rocket launch",
    "puppy playing fetch",
    "old castle ruins",
    "farmers market",
    "lighthouse storm",
];

const EXTRA_WORDS: &[&str] = &[
    "bright", "quiet", "crowded", "golden", "misty", "vivid", "calm", "windy", "warm", "dusky",
];

const GENERIC_PROMPT: &str = "high quality, beautiful, detailed";
const GENERIC_SCRIPT: &str = "write a short friendly narration";

pub fn seeded_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_parts(parts))
}

fn query_for(task: TaskType, subject: &str) -> String {
    match task.output() {
        Modality::Text => format!("Write a short description of the {subject}"),
        Modality::Image => format!("Design a poster image for the {subject}"),
        Modality::Video => format!("Create a video about the {subject}"),
        _ => format!("Make an audio story about the {subject}"),
    }
}

/// Input modalities for a request of `task`. "Multiple" tasks get 2 or 3.
fn material_modalities(task: TaskType, rng: &mut impl Rng) -> Vec<Modality> {
    let [a, b] = task.inputs();
    if task.is_multiple() && rng.random_bool(0.5) {
        vec![a, a, a]
    } else {
        vec![a, b]
    }
}

/// `per_task` requests for every task type, with placeholder materials whose
/// embedded descriptors mention the request's subject.
pub fn synthetic_requests(per_task: usize, seed: u64) -> Vec<CurationRequest> {
    let mut out = Vec::with_capacity(per_task * TaskType::ALL.len());
    for task in TaskType::ALL {
        for k in 0..per_task {
            let request_id = format!("{}-{k:03}", task.code().to_ascii_lowercase());
            let mut rng = seeded_rng(&[&seed.to_le_bytes(), request_id.as_bytes()]);
            let subject = *SUBJECTS.choose(&mut rng).expect("non-empty");
            let mut counts: BTreeMap<Modality, usize> = BTreeMap::new();
            let materials = material_modalities(task, &mut rng)
                .into_iter()
                .map(|m| {
                    let n = counts.entry(m).or_default();
                    *n += 1;
                    let ext = m.canonical_extension();
                    let name = format!("{request_id}_{}_{n}.{ext}", m.token());
                    let extra = EXTRA_WORDS.choose(&mut rng).expect("non-empty");
                    Material {
                        artifact: ArtifactRef::parse(&name).expect("generated name is valid"),
                        bytes: media::placeholder(ext, &format!("{subject} {extra}")),
                    }
                })
                .collect();
            out.push(CurationRequest {
                request_id,
                query: query_for(task, subject),
                task_type: task,
                materials,
            });
        }
    }
    out
}

/// Defect rates of the template generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefectRates {
    pub omit_audio_merge: f64,
    pub ungrounded_narration: f64,
    pub generic_literal: f64,
    pub format_slip: f64,
    pub truncate: f64,
}

impl Default for DefectRates {
    fn default() -> Self {
        Self {
            omit_audio_merge: 0.5,
            ungrounded_narration: 0.4,
            generic_literal: 0.3,
            format_slip: 0.12,
            truncate: 0.1,
        }
    }
}

/// Offline stand-in for an LLM planner: picks a per-task template and injects
/// the kinds of mistakes the correction loop is meant to repair.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateGenerator {
    pub seed: u64,
    pub rates: DefectRates,
}

impl TemplateGenerator {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rates: DefectRates::default(),
        }
    }

    pub fn generate(&self, query: &str, task: TaskType, materials: &[ArtifactRef]) -> Plan {
        let names: Vec<&[u8]> = materials.iter().map(|m| m.filename().as_bytes()).collect();
        let mut parts: Vec<&[u8]> = vec![b"template", query.as_bytes(), task.code().as_bytes()];
        let seed = self.seed.to_le_bytes();
        parts.push(&seed);
        parts.extend(names);
        let mut rng = seeded_rng(&parts);
        let mut b = Builder {
            plan: Plan::new(query, task, materials.to_vec()),
            prompt: if rng.random_bool(self.rates.generic_literal) {
                GENERIC_PROMPT.to_string()
            } else {
                query_prompt(query)
            },
        };
        let omit_merge = rng.random_bool(self.rates.omit_audio_merge);
        let ungrounded = rng.random_bool(self.rates.ungrounded_narration);
        match task.output() {
            Modality::Text => b.text_task(),
            Modality::Image => b.image_task(&mut rng),
            Modality::Video => b.video_task(&mut rng, omit_merge),
            _ => b.audio_task(&mut rng, ungrounded),
        }
        let mut plan = b.plan;
        let draw: f64 = rng.random();
        if draw < self.rates.format_slip {
            if let Some(last) = plan.steps.last() {
                let ext = last.output.extension();
                let wrong = Extension::ALL[(Extension::ALL.iter().position(|&e| e == ext).unwrap() + 1) % 4];
                let renamed = plan.fresh_filename(last.output.stem(), wrong);
                plan.steps.last_mut().unwrap().output = renamed;
            }
        } else if draw < self.rates.format_slip + self.rates.truncate {
            let target = task.output().canonical_extension();
            while plan.steps.iter().any(|s| s.output.extension() == target) && plan.steps.len() > 1 {
                plan.steps.pop();
            }
        }
        plan
    }
}

impl CriticClient for TemplateGenerator {
    fn propose(&self, request: &CriticRequest<'_>) -> Result<Value, CriticError> {
        if request.plan.is_some() {
            return Err(CriticError::Unsupported("the template generator only writes first drafts".into()));
        }
        Ok(serialize_plan(&self.generate(request.query, request.task_type, request.materials)))
    }
}

fn lit(s: &str) -> Binding {
    Binding::Single(StepArgument::literal(s))
}

fn one(r: &ArtifactRef) -> Binding {
    Binding::Single(StepArgument::Reference(r.clone()))
}

fn many(rs: &[ArtifactRef]) -> Binding {
    Binding::List(rs.iter().cloned().map(StepArgument::Reference).collect())
}

struct Builder {
    plan: Plan,
    prompt: String,
}

impl Builder {
    fn add(&mut self, tool: &str, args: Vec<(&str, Binding)>, stem: &str, ext: Extension) -> ArtifactRef {
        let output = self.plan.fresh_filename(stem, ext);
        let index = self.plan.steps.len();
        self.plan.steps.push(PlanStep {
            index,
            tool: tool.to_string(),
            args: args.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            output: output.clone(),
        });
        output
    }

    fn materials(&self, ext: Extension) -> Vec<ArtifactRef> {
        self.plan.materials.iter().filter(|m| m.extension() == ext).cloned().collect()
    }

    fn caption(&mut self, m: &ArtifactRef) -> ArtifactRef {
        let stem = format!("caption_{}", self.plan.steps.len() + 1);
        match m.extension() {
            Extension::Png => self.add("image_png_to_text_txt", vec![("image", one(m))], &stem, Extension::Txt),
            Extension::Mp4 => self.add("video_mp4_to_text_txt", vec![("video", one(m))], &stem, Extension::Txt),
            Extension::Mp3 => self.add("audio_mp3_to_text_txt", vec![("audio", one(m))], &stem, Extension::Txt),
            Extension::Txt => m.clone(),
        }
    }

    fn caption_all(&mut self) -> Vec<ArtifactRef> {
        let materials = self.plan.materials.clone();
        materials.iter().map(|m| self.caption(m)).collect()
    }

    fn summarize(&mut self, captions: &[ArtifactRef], stem: &str) -> ArtifactRef {
        let prompt = self.prompt.clone();
        self.add(
            "text_txt_to_text_txt",
            vec![("instruction", lit(&prompt)), ("context", many(captions))],
            stem,
            Extension::Txt,
        )
    }

    fn music(&mut self, context: Option<&ArtifactRef>) -> ArtifactRef {
        let prompt = self.prompt.clone();
        let mut args = vec![("prompt", lit(&prompt))];
        if let Some(c) = context {
            args.push(("context", one(c)));
        }
        self.add("text_txt_to_audio_mp3", args, "music", Extension::Mp3)
    }

    fn mux(&mut self, video: &ArtifactRef, audio: &ArtifactRef) -> ArtifactRef {
        self.add(
            "video_mp4_audio_mp3_to_video_mp4",
            vec![("video", one(video)), ("audio", one(audio))],
            "final",
            Extension::Mp4,
        )
    }

    fn text_task(&mut self) {
        let captions = self.caption_all();
        self.summarize(&captions, "answer");
    }

    fn image_task(&mut self, rng: &mut impl Rng) {
        let prompt = self.prompt.clone();
        let captions = self.caption_all();
        let summary = self.summarize(&captions, "summary");
        let frames = self.materials(Extension::Mp4);
        let poster = match frames.first() {
            Some(video) => {
                let frame = self.add("video_mp4_to_image_png", vec![("video", one(video))], "frame", Extension::Png);
                self.add(
                    "text_txt_image_png_to_image_png",
                    vec![("prompt", lit(&prompt)), ("context", one(&summary)), ("reference", one(&frame))],
                    "poster",
                    Extension::Png,
                )
            }
            None => self.add(
                "text_txt_to_image_png",
                vec![("prompt", lit(&prompt)), ("context", one(&summary))],
                "poster",
                Extension::Png,
            ),
        };
        if rng.random_bool(0.5) {
            self.add(
                "image_png_to_image_png",
                vec![("image", one(&poster)), ("instruction", lit(&prompt))],
                "poster_final",
                Extension::Png,
            );
        }
    }

    fn audio_task(&mut self, rng: &mut impl Rng, ungrounded: bool) {
        let prompt = self.prompt.clone();
        let own_audio = self.materials(Extension::Mp3);
        let visual: Vec<ArtifactRef> =
            self.plan.materials.iter().filter(|m| m.extension() != Extension::Mp3).cloned().collect();
        let captions: Vec<ArtifactRef> = visual.iter().map(|m| self.caption(m)).collect();

        if !own_audio.is_empty() {
            // Score the visuals and mix the result with the provided track.
            let summary = self.summarize(&captions, "summary");
            let music = self.music(Some(&summary));
            let mut tracks = own_audio;
            tracks.push(music);
            self.add(
                "audio_mp3_to_audio_mp3",
                vec![("audios", many(&tracks)), ("effect", lit("balance levels"))],
                "final",
                Extension::Mp3,
            );
            return;
        }

        if rng.random_bool(0.5) {
            let script = if ungrounded {
                self.add("text_txt_to_text_txt", vec![("instruction", lit(GENERIC_SCRIPT))], "script", Extension::Txt)
            } else {
                self.summarize(&captions, "script")
            };
            let voice = self.add("text_txt_to_speech_mp3", vec![("script", one(&script))], "voice", Extension::Mp3);
            if rng.random_bool(0.5) {
                let music = self.music(None);
                self.add(
                    "audio_mp3_to_audio_mp3",
                    vec![("audios", many(&[voice, music])), ("effect", lit("duck music under voice"))],
                    "final",
                    Extension::Mp3,
                );
            }
        } else {
            let summary = self.summarize(&captions, "summary");
            let music = self.music(Some(&summary));
            if rng.random_bool(0.3) {
                self.add(
                    "audio_mp3_to_audio_mp3",
                    vec![("audios", many(&[music])), ("effect", lit(&prompt))],
                    "final",
                    Extension::Mp3,
                );
            }
        }
    }

    fn video_task(&mut self, rng: &mut impl Rng, omit_merge: bool) {
        let prompt = self.prompt.clone();
        let images = self.materials(Extension::Png);
        let videos = self.materials(Extension::Mp4);
        let audios = self.materials(Extension::Mp3);

        // Picture track.
        let mut picture = if !images.is_empty() && audios.len() == 1 && videos.is_empty() && !omit_merge {
            // Image plus a provided track: one slideshow step does both.
            self.add(
                "image_png_audio_mp3_to_video_mp4",
                vec![("images", many(&images)), ("audio", one(&audios[0]))],
                "final",
                Extension::Mp4,
            );
            return;
        } else if !images.is_empty() {
            let clip = self.add(
                "image_png_to_video_mp4",
                vec![("images", many(&images)), ("prompt", lit(&prompt))],
                "slideshow",
                Extension::Mp4,
            );
            if videos.is_empty() {
                clip
            } else {
                let mut all = vec![clip];
                all.extend(videos.iter().cloned());
                self.add("video_mp4_to_video_mp4", vec![("videos", many(&all))], "combined", Extension::Mp4)
            }
        } else if !videos.is_empty() {
            self.add(
                "video_mp4_to_video_mp4",
                vec![("videos", many(&videos)), ("effect", lit(&prompt))],
                "edited",
                Extension::Mp4,
            )
        } else {
            let captions = self.caption_all();
            let summary = self.summarize(&captions, "summary");
            self.add(
                "text_txt_to_video_mp4",
                vec![("prompt", lit(&prompt)), ("script", one(&summary))],
                "clip",
                Extension::Mp4,
            )
        };
        if rng.random_bool(0.3) {
            picture = self.add(
                "video_mp4_to_video_mp4",
                vec![("videos", many(&[picture])), ("effect", lit("smooth transitions"))],
                "polished",
                Extension::Mp4,
            );
        }
        if omit_merge {
            return;
        }

        // Sound track.
        let track = match audios.len() {
            0 => self.music(None),
            1 => audios[0].clone(),
            _ => self.add(
                "audio_mp3_to_audio_mp3",
                vec![("audios", many(&audios)), ("effect", lit("crossfade"))],
                "mix",
                Extension::Mp3,
            ),
        };
        self.mux(&picture, &track);
    }
}

const WORDS: &[&str] = &[
    "river", "sunrise", "city", "market", "forest", "robot", "violin", "storm", "garden", "train", "castle",
    "harbor", "desert", "festival", "glacier", "lantern",
];

pub const RANDOM_PLAN_MATERIALS: [&str; 4] = ["m_image.png", "m_video.mp4", "m_audio.mp3", "m_text.txt"];

fn random_words(rng: &mut impl Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
}

/// A random plan of `n_steps` that is valid against `lib` by construction:
/// every required parameter is bound to an available artifact of the right
/// extension or to a literal.
pub fn random_valid_plan(lib: &ToolLibrary, rng: &mut impl Rng, n_steps: usize) -> Plan {
    let materials: Vec<ArtifactRef> = RANDOM_PLAN_MATERIALS
        .iter()
        .map(|m| ArtifactRef::parse(m).expect("valid"))
        .collect();
    let task = *TaskType::ALL.choose(rng).expect("non-empty");
    let query = random_words(rng, 4);
    let mut plan = Plan::new(query, task, materials.clone());
    let mut available = materials;
    for i in 0..n_steps {
        let usable: Vec<_> = lib
            .tools()
            .filter(|t| {
                t.params.iter().filter(|p| p.required).all(|p| match p.expects.extension() {
                    None => true,
                    Some(ext) => available.iter().any(|a| a.extension() == ext),
                })
            })
            .collect();
        let Some(spec) = usable.choose(rng) else { break };
        let mut args = BTreeMap::new();
        for p in &spec.params {
            if !p.required && rng.random_bool(0.5) {
                continue;
            }
            let binding = match p.expects {
                Expects::Literal => lit(&random_words(rng, 3)),
                Expects::Media(m) => {
                    let pool: Vec<&ArtifactRef> =
                        available.iter().filter(|a| a.extension() == m.canonical_extension()).collect();
                    if pool.is_empty() {
                        continue;
                    }
                    if p.repeatable && rng.random_bool(0.6) {
                        let k = rng.random_range(1..=3);
                        Binding::List(
                            (0..k)
                                .map(|_| StepArgument::Reference((*pool.choose(rng).expect("non-empty")).clone()))
                                .collect(),
                        )
                    } else {
                        one(pool.choose(rng).expect("non-empty"))
                    }
                }
            };
            args.insert(p.name.clone(), binding);
        }
        let output = plan.fresh_filename(&format!("s{i}"), spec.output.extension());
        plan.push_step(spec.canonical_name(), args, output.clone());
        available.push(output);
    }
    plan
}

/// A chain of `n` text steps, each consuming the previous output.
pub fn linear_plan(n: usize, query: &str) -> Plan {
    let mut plan = Plan::new(query, TaskType::MiT, Vec::new());
    let mut prev: Option<ArtifactRef> = None;
    for i in 0..n {
        let mut args = BTreeMap::from([("instruction".to_string(), lit("continue"))]);
        if let Some(p) = &prev {
            args.insert("context".into(), many(std::slice::from_ref(p)));
        }
        let output = ArtifactRef::parse(&format!("t{i}.txt")).expect("valid");
        plan.push_step("text_txt_to_text_txt", args, output.clone());
        prev = Some(output);
    }
    plan
}

/// Every diagnostic kind a single mutation can target.
pub const MUTATION_KINDS: [DiagnosticKind; 9] = [
    DiagnosticKind::UnknownTool,
    DiagnosticKind::MissingParam,
    DiagnosticKind::UnknownParam,
    DiagnosticKind::ModalityMismatch,
    DiagnosticKind::OutputFormatMismatch,
    DiagnosticKind::LiteralToMediaParam,
    DiagnosticKind::ArityMismatch,
    DiagnosticKind::UnresolvedReference,
    DiagnosticKind::ForwardReference,
];

/// Bindings `(step, param)` in `plan` whose value is a single file reference.
fn single_refs(plan: &Plan) -> Vec<(usize, String, ArtifactRef)> {
    let mut out = Vec::new();
    for (i, s) in plan.steps.iter().enumerate() {
        for (name, b) in &s.args {
            if let Binding::Single(StepArgument::Reference(r)) = b {
                out.push((i, name.clone(), r.clone()));
            }
        }
    }
    out
}

fn any_refs(plan: &Plan) -> Vec<(usize, String, usize, ArtifactRef)> {
    let mut out = Vec::new();
    for (i, s) in plan.steps.iter().enumerate() {
        for (name, b) in &s.args {
            for (j, a) in b.items().iter().enumerate() {
                if let StepArgument::Reference(r) = a {
                    out.push((i, name.clone(), j, r.clone()));
                }
            }
        }
    }
    out
}

fn set_item(plan: &mut Plan, step: usize, param: &str, item: usize, value: StepArgument) {
    let binding = plan.steps[step].args.get_mut(param).expect("param present");
    binding.items_mut()[item] = value;
}

/// Applies one corruption to a valid `plan` that should produce exactly the
/// diagnostic `kind`. Returns `None` when the plan offers no place for it.
pub fn mutate(plan: &Plan, lib: &ToolLibrary, kind: DiagnosticKind, rng: &mut impl Rng) -> Option<Plan> {
    let mut p = plan.clone();
    let n = p.steps.len();
    if n == 0 {
        return None;
    }
    match kind {
        DiagnosticKind::UnknownTool => {
            let i = rng.random_range(0..n);
            p.steps[i].tool = format!("{}_v2", p.steps[i].tool);
        }
        DiagnosticKind::MissingParam => {
            let spots: Vec<(usize, String)> = p
                .steps
                .iter()
                .enumerate()
                .flat_map(|(i, s)| {
                    let spec = lib.get(&s.tool).expect("valid plan");
                    spec.params.iter().filter(|q| q.required).map(move |q| (i, q.name.clone()))
                })
                .collect();
            let (i, name) = spots.choose(rng)?.clone();
            p.steps[i].args.remove(&name);
        }
        DiagnosticKind::UnknownParam => {
            let i = rng.random_range(0..n);
            p.steps[i].args.insert("bogus_param".into(), lit("x"));
        }
        DiagnosticKind::ModalityMismatch => {
            let (i, name, j, r) = any_refs(&p).choose(rng)?.clone();
            let wrong = RANDOM_PLAN_MATERIALS
                .iter()
                .map(|m| ArtifactRef::parse(m).expect("valid"))
                .filter(|m| m.extension() != r.extension() && p.is_material(m.filename()))
                .collect::<Vec<_>>();
            let w = wrong.choose(rng)?.clone();
            set_item(&mut p, i, &name, j, StepArgument::Reference(w));
        }
        DiagnosticKind::OutputFormatMismatch => {
            let finals: Vec<usize> = p
                .final_outputs()
                .iter()
                .filter_map(|r| p.producer(r.filename()))
                .collect();
            let i = *finals.choose(rng)?;
            let ext = p.steps[i].output.extension();
            let others: Vec<Extension> = Extension::ALL.into_iter().filter(|&e| e != ext).collect();
            let wrong = *others.choose(rng)?;
            let stem = p.steps[i].output.stem().to_string();
            p.steps[i].output = p.fresh_filename(&stem, wrong);
        }
        DiagnosticKind::LiteralToMediaParam => {
            let (i, name, j, _) = any_refs(&p).choose(rng)?.clone();
            set_item(&mut p, i, &name, j, StepArgument::literal("a literal"));
        }
        DiagnosticKind::ArityMismatch => {
            let spots: Vec<_> = single_refs(&p)
                .into_iter()
                .filter(|(i, name, _)| {
                    lib.get(&p.steps[*i].tool)
                        .and_then(|s| s.param(name))
                        .is_some_and(|q| !q.repeatable)
                })
                .collect();
            let (i, name, r) = spots.choose(rng)?.clone();
            p.steps[i].args.insert(name, many(&[r]));
        }
        DiagnosticKind::UnresolvedReference => {
            let (i, name, j, r) = any_refs(&p).choose(rng)?.clone();
            let ghost = p.fresh_filename("ghost", r.extension());
            set_item(&mut p, i, &name, j, StepArgument::Reference(ghost));
        }
        DiagnosticKind::ForwardReference => {
            let spots: Vec<_> = any_refs(&p)
                .into_iter()
                .filter_map(|(i, name, j, r)| {
                    let later: Vec<ArtifactRef> = p.steps[i..]
                        .iter()
                        .map(|s| s.output.clone())
                        .filter(|o| o.extension() == r.extension())
                        .collect();
                    later.first().cloned().map(|l| (i, name, j, l))
                })
                .collect();
            let (i, name, j, later) = spots.choose(rng)?.clone();
            set_item(&mut p, i, &name, j, StepArgument::Reference(later));
        }
    }
    Some(p)
}
