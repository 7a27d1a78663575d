//! Closed-vocabulary question and answer templates.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnswerType, InstructionSample, SampleMeta, Task};
use crate::prompt::format_grounding_answer;
use crate::scene::palette::{plural, COLORS};
use crate::scene::{ObjectSummary, SceneSummary};

/// Appended verbatim to every grounding description.
pub const LOCATE_CLAUSE: &str =
    "and locate its position with the coordinate of center x, y, z and its length, width and height.";

const LEFT_OF_MARGIN: f64 = 0.2;
const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

/// Samples produced by one generator call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Generated {
    pub samples: Vec<InstructionSample>,
    /// The quota asked for more samples than the templates can produce.
    pub truncated: bool,
    /// Items dropped because no valid instance could be built.
    pub skipped: usize,
}

/// Stable per-purpose seed: FNV-1a of `tag` mixed into `seed`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

fn sample(scene: &SceneSummary, task: Task, k: usize, instruction: String, answer: String, meta: SampleMeta) -> InstructionSample {
    InstructionSample {
        sample_id: format!("{}-{}-{k:04}", scene.scene_id, task.short()),
        scene_id: scene.scene_id.clone(),
        task,
        instruction,
        answer,
        meta,
    }
}

fn dist(a: &ObjectSummary, b: &ObjectSummary) -> f64 {
    (0..3)
        .map(|i| (a.bbox.center[i] - b.bbox.center[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Distinct classes in order of first appearance, with their objects.
fn classes(scene: &SceneSummary) -> Vec<(&str, Vec<&ObjectSummary>)> {
    let mut out: Vec<(&str, Vec<&ObjectSummary>)> = Vec::new();
    for o in &scene.objects {
        match out.iter_mut().find(|(c, _)| *c == o.class_name) {
            Some((_, v)) => v.push(o),
            None => out.push((&o.class_name, vec![o])),
        }
    }
    out
}

fn unique_class(scene: &SceneSummary, class: &str) -> bool {
    scene.objects.iter().filter(|o| o.class_name == class).count() == 1
}

fn vqa_candidates(scene: &SceneSummary, seed: u64) -> Vec<(String, String, AnswerType)> {
    let by_class = classes(scene);
    let mut out = Vec::new();
    for (class, objs) in &by_class {
        if objs.iter().all(|o| o.color_name == objs[0].color_name) {
            out.push((format!("What color is the {class}?"), objs[0].color_name.clone(), AnswerType::Color));
        }
        out.push((
            format!("How many {} are in the room?", plural(class)),
            objs.len().to_string(),
            AnswerType::Count,
        ));
    }
    let mut colors: Vec<&str> = scene.objects.iter().map(|o| o.color_name.as_str()).collect();
    colors.dedup();
    for color in colors.iter().copied().collect::<std::collections::BTreeSet<_>>() {
        let with: Vec<&ObjectSummary> = scene.objects.iter().filter(|o| o.color_name == color).collect();
        if with.len() == 1 {
            out.push((format!("What is the {color} object?"), with[0].class_name.clone(), AnswerType::Class));
        }
    }
    for o in &scene.objects {
        if !unique_class(scene, &o.class_name) || scene.objects.len() < 2 {
            continue;
        }
        let mut others: Vec<(&ObjectSummary, f64)> = scene
            .objects
            .iter()
            .filter(|p| p.object_id != o.object_id)
            .map(|p| (p, dist(o, p)))
            .collect();
        others.sort_by(|a, b| a.1.total_cmp(&b.1));
        let unambiguous = others.len() == 1 || others[1].1 - others[0].1 > 1e-6;
        if unambiguous {
            out.push((
                format!("What is the closest object to the {}?", o.class_name),
                others[0].0.class_name.clone(),
                AnswerType::Class,
            ));
        }
    }
    for a in &scene.objects {
        for b in &scene.objects {
            if a.object_id == b.object_id
                || a.class_name == b.class_name
                || !unique_class(scene, &a.class_name)
                || !unique_class(scene, &b.class_name)
            {
                continue;
            }
            let dx = b.bbox.center[0] - a.bbox.center[0];
            if dx.abs() > LEFT_OF_MARGIN {
                let answer = if dx > 0.0 { "yes" } else { "no" };
                out.push((
                    format!("Is the {} to the left of the {}?", a.class_name, b.class_name),
                    answer.to_string(),
                    AnswerType::YesNo,
                ));
            }
        }
    }
    let present: Vec<&str> = by_class.iter().map(|(c, _)| *c).collect();
    let mut absent: Vec<&str> = crate::scene::palette::CLASSES
        .iter()
        .map(|(c, _)| *c)
        .filter(|c| !present.contains(c))
        .collect();
    absent.shuffle(&mut rng_for(seed, &format!("absent/{}", scene.scene_id)));
    for c in &present {
        out.push((format!("Is there a {c} in the room?"), "yes".into(), AnswerType::YesNo));
    }
    for c in absent.iter().take(present.len()) {
        out.push((format!("Is there a {c} in the room?"), "no".into(), AnswerType::YesNo));
    }
    out
}

/// Attribute, count and spatial-relation questions about one scene.
pub fn make_vqa(scene: &SceneSummary, seed: u64, quota: usize) -> Generated {
    let mut cands = vqa_candidates(scene, seed);
    cands.shuffle(&mut rng_for(seed, &format!("vqa/{}", scene.scene_id)));
    let truncated = quota > cands.len();
    let samples = cands
        .into_iter()
        .take(quota)
        .enumerate()
        .map(|(k, (q, a, t))| {
            sample(
                scene,
                Task::Vqa,
                k,
                q,
                a,
                SampleMeta {
                    answer_type: Some(t),
                    ..Default::default()
                },
            )
        })
        .collect();
    Generated {
        samples,
        truncated,
        skipped: 0,
    }
}

/// Class counts in a fixed sentence frame, one sample per scene.
pub fn make_caption(scene: &SceneSummary) -> InstructionSample {
    let by_class = classes(scene);
    let answer = if by_class.is_empty() {
        "an empty room".to_string()
    } else {
        let items: Vec<String> = by_class
            .iter()
            .map(|(c, objs)| {
                let noun = if objs.len() == 1 { c.to_string() } else { plural(c) };
                format!("{} {noun}", objs.len())
            })
            .collect();
        let list = match items.as_slice() {
            [one] => one.clone(),
            [init @ .., last] => format!("{} and {last}", init.join(", ")),
            [] => unreachable!(),
        };
        format!("The room contains {list}.")
    };
    sample(scene, Task::Caption, 0, "Describe the scene.".into(), answer, SampleMeta::default())
}

/// Relational cues that single out `target` among objects of its class.
fn grounding_cues(scene: &SceneSummary, target: &ObjectSummary) -> Vec<String> {
    let same: Vec<&ObjectSummary> = scene
        .objects
        .iter()
        .filter(|o| o.class_name == target.class_name)
        .collect();
    let mut landmarks: Vec<&ObjectSummary> = scene
        .objects
        .iter()
        .filter(|o| o.class_name != target.class_name && unique_class(scene, &o.class_name))
        .collect();
    landmarks.sort_by(|a, b| dist(target, a).total_cmp(&dist(target, b)));
    let mut cues: Vec<String> = landmarks
        .iter()
        .filter(|l| {
            let d = dist(target, l);
            same.iter()
                .filter(|o| o.object_id != target.object_id)
                .all(|o| dist(o, l) > d + 1e-6)
        })
        .map(|l| format!("that is closest to the {}", l.class_name))
        .collect();
    if same.len() == 1 && cues.is_empty() {
        cues.push(String::new());
    }
    cues.truncate(3);
    cues
}

const PHRASES: [&str; 4] = ["Find", "Look for", "Identify", "Search for"];

/// Object descriptions with the locate clause; answers are canonical box strings.
pub fn make_grounding(scene: &SceneSummary, seed: u64, quota: usize) -> Generated {
    let mut cands = Vec::new();
    let mut skipped = 0;
    for obj in &scene.objects {
        let cues = grounding_cues(scene, obj);
        if cues.is_empty() {
            skipped += 1;
            continue;
        }
        for cue in &cues {
            for phrase in PHRASES {
                let mut desc = format!("{phrase} the {} {}", obj.color_name, obj.class_name);
                if !cue.is_empty() {
                    desc.push(' ');
                    desc.push_str(cue);
                }
                cands.push((format!("{desc} {LOCATE_CLAUSE}"), obj));
            }
        }
    }
    cands.shuffle(&mut rng_for(seed, &format!("grounding/{}", scene.scene_id)));
    let truncated = quota > cands.len();
    let samples = cands
        .into_iter()
        .take(quota)
        .enumerate()
        .map(|(k, (instruction, obj))| {
            sample(
                scene,
                Task::Grounding,
                k,
                instruction,
                format_grounding_answer(obj.object_id, &obj.bbox),
                SampleMeta {
                    object_id: Some(obj.object_id),
                    bbox: Some(obj.bbox),
                    ..Default::default()
                },
            )
        })
        .collect();
    Generated {
        samples,
        truncated,
        skipped,
    }
}

fn distractors(
    gt: &str,
    kind: AnswerType,
    scene_classes: &[String],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<String>> {
    let mut pool: Vec<String> = match kind {
        AnswerType::Color => COLORS.iter().map(|c| c.name.to_string()).collect(),
        AnswerType::Count => {
            let n: i64 = gt.parse().ok()?;
            [n - 2, n - 1, n + 1, n + 2]
                .into_iter()
                .filter(|&v| v >= 0)
                .map(|v| v.to_string())
                .collect()
        }
        AnswerType::Class => scene_classes.to_vec(),
        AnswerType::YesNo => vec!["yes".into(), "no".into()],
    };
    pool.retain(|p| p != gt);
    pool.sort();
    pool.dedup();
    if pool.len() < 3 {
        return None;
    }
    Some(pool.choose_multiple(rng, 3).cloned().collect())
}

/// Four-way questions built from VQA samples, cycling through the pool until
/// `count` items exist. `scene_classes` supplies the class distractor pool per scene.
pub fn make_multiple_choice(
    vqa: &[InstructionSample],
    scene_classes: &BTreeMap<String, Vec<String>>,
    seed: u64,
    count: usize,
) -> Generated {
    let mut rng = rng_for(seed, "multiple_choice");
    let mut order: Vec<&InstructionSample> = vqa.iter().collect();
    order.shuffle(&mut rng);
    let mut out = Generated::default();
    let mut per_scene: BTreeMap<&str, usize> = BTreeMap::new();
    let empty = Vec::new();
    'cycle: loop {
        let mut made_this_cycle = 0;
        for src in &order {
            if out.samples.len() == count {
                break 'cycle;
            }
            let Some(kind) = src.meta.answer_type else {
                out.skipped += 1;
                continue;
            };
            let classes = scene_classes.get(&src.scene_id).unwrap_or(&empty);
            let Some(mut opts) = distractors(&src.answer, kind, classes, &mut rng) else {
                log::debug!("{}: too few distinct distractors, skipped", src.sample_id);
                out.skipped += 1;
                continue;
            };
            opts.shuffle(&mut rng);
            let gt_pos = rng.random_range(0..4);
            opts.insert(gt_pos, src.answer.clone());
            let listing: Vec<String> = LETTERS
                .iter()
                .zip(&opts)
                .map(|(l, o)| format!("{l}. {o}"))
                .collect();
            let instruction = format!("{} Options: {}", src.instruction, listing.join(" "));
            let k = per_scene.entry(src.scene_id.as_str()).or_insert(0);
            out.samples.push(InstructionSample {
                sample_id: format!("{}-mc-{:04}", src.scene_id, *k),
                scene_id: src.scene_id.clone(),
                task: Task::MultipleChoice,
                instruction,
                answer: LETTERS[gt_pos].to_string(),
                meta: SampleMeta {
                    answer_type: Some(kind),
                    question: Some(src.instruction.clone()),
                    options: Some(opts),
                    gt_letter: Some(LETTERS[gt_pos]),
                    ..Default::default()
                },
            });
            *k += 1;
            made_this_cycle += 1;
        }
        if made_this_cycle == 0 {
            break;
        }
    }
    out.truncated = out.samples.len() < count;
    out
}

/// A chain of `n_turns` VQA exchanges; each instruction carries the transcript so far.
pub fn make_conversation(scene: &SceneSummary, seed: u64, n_turns: usize, chain: usize) -> Generated {
    assert!(n_turns >= 2, "a conversation needs at least two turns");
    let mut cands = vqa_candidates(scene, seed);
    cands.shuffle(&mut rng_for(seed, &format!("conversation/{}/{chain}", scene.scene_id)));
    let truncated = cands.len() < n_turns;
    let conversation_id = format!("{}-conv{chain:02}", scene.scene_id);
    let mut transcript = String::new();
    let mut samples = Vec::new();
    for (turn, (q, a, t)) in cands.into_iter().take(n_turns).enumerate() {
        let instruction = if transcript.is_empty() {
            q.clone()
        } else {
            format!("{transcript} Q: {q}")
        };
        samples.push(InstructionSample {
            sample_id: format!("{conversation_id}-t{turn}"),
            scene_id: scene.scene_id.clone(),
            task: Task::Conversation,
            instruction,
            answer: a.clone(),
            meta: SampleMeta {
                answer_type: Some(t),
                conversation_id: Some(conversation_id.clone()),
                turn: Some(turn),
                ..Default::default()
            },
        });
        if !transcript.is_empty() {
            transcript.push(' ');
        }
        transcript.push_str(&format!("Q: {q} A: {a}."));
    }
    Generated {
        samples,
        truncated,
        skipped: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::parse_grounding_answer;
    use crate::scene::{BBox3D, ObjectAttributes};

    fn obj(id: u32, class: &str, color: &str, center: [f64; 3], size: [f64; 3]) -> ObjectSummary {
        ObjectSummary {
            object_id: id,
            class_name: class.into(),
            color_name: color.into(),
            point_count: 2,
            attributes: ObjectAttributes {
                center,
                size,
                mean_color: [0.0; 3],
            },
            bbox: BBox3D::new(center, size),
        }
    }

    fn scene(objects: Vec<ObjectSummary>) -> SceneSummary {
        SceneSummary {
            scene_id: "s0".into(),
            point_count: 2 * objects.len(),
            objects,
        }
    }

    fn find<'a>(g: &'a Generated, q: &str) -> &'a InstructionSample {
        g.samples.iter().find(|s| s.instruction == q).expect(q)
    }

    #[test]
    fn color_and_count_questions() {
        let s = scene(vec![obj(0, "chair", "red", [0.0; 3], [1.0; 3])]);
        let g = make_vqa(&s, 0, usize::MAX);
        assert!(g.truncated);
        assert_eq!(find(&g, "What color is the chair?").answer, "red");
        let s = scene((0..3).map(|i| obj(i, "chair", "red", [i as f64 * 2.0, 0.0, 0.0], [1.0; 3])).collect());
        let g = make_vqa(&s, 0, usize::MAX);
        assert_eq!(find(&g, "How many chairs are in the room?").answer, "3");
    }

    #[test]
    fn vqa_is_seed_deterministic() {
        let s = scene(vec![
            obj(0, "chair", "red", [0.0; 3], [1.0; 3]),
            obj(1, "table", "brown", [3.0, 0.0, 0.0], [1.0; 3]),
        ]);
        assert_eq!(make_vqa(&s, 4, 5), make_vqa(&s, 4, 5));
        let q = make_vqa(&s, 4, usize::MAX);
        assert_eq!(find(&q, "Is the chair to the left of the table?").answer, "yes");
        assert_eq!(find(&q, "What is the closest object to the chair?").answer, "table");
    }

    #[test]
    fn captions() {
        let s = scene(vec![
            obj(0, "chair", "red", [0.0; 3], [1.0; 3]),
            obj(1, "chair", "red", [2.0, 0.0, 0.0], [1.0; 3]),
            obj(2, "table", "brown", [4.0, 0.0, 0.0], [1.0; 3]),
        ]);
        let c = make_caption(&s);
        assert!(c.answer.contains("2 chairs"));
        assert!(c.answer.contains("1 table"));
        assert_eq!(make_caption(&scene(vec![])).answer, "an empty room");
    }

    #[test]
    fn grounding_answer_format_and_disambiguation() {
        let s = scene(vec![
            obj(3, "chair", "red", [1.0, 1.0, 0.5], [0.5, 0.5, 1.0]),
            obj(4, "chair", "red", [5.0, 1.0, 0.5], [0.5, 0.5, 1.0]),
            obj(5, "table", "brown", [2.0, 1.0, 0.5], [1.0, 1.0, 1.0]),
        ]);
        let g = make_grounding(&s, 0, usize::MAX);
        let first = g.samples.iter().find(|x| x.meta.object_id == Some(3)).unwrap();
        assert_eq!(first.answer, "obj_3 [1.00, 1.00, 0.50, 0.50, 0.50, 1.00]");
        assert!(first.instruction.contains("closest to the table"));
        assert!(first.instruction.ends_with(LOCATE_CLAUSE));
        // The far chair has no landmark it is closest to, so it cannot be described unambiguously.
        assert!(g.samples.iter().all(|x| x.meta.object_id != Some(4)));
        assert_eq!(g.skipped, 1);
        let (id, b) = parse_grounding_answer(&first.answer);
        assert_eq!(id, Some(3));
        assert_eq!(crate::metrics::iou_3d(&b.unwrap(), &first.meta.bbox.unwrap()), 1.0);
    }

    #[test]
    fn multiple_choice_options() {
        let s = scene(vec![
            obj(0, "chair", "red", [0.0; 3], [1.0; 3]),
            obj(1, "table", "brown", [3.0, 0.0, 0.0], [1.0; 3]),
        ]);
        let vqa = make_vqa(&s, 0, usize::MAX).samples;
        let classes = BTreeMap::from([("s0".to_string(), vec!["chair".to_string(), "table".to_string()])]);
        let mc = make_multiple_choice(&vqa, &classes, 1, 40);
        assert_eq!(mc.samples.len(), 40);
        assert!(mc.skipped > 0, "yes/no and class questions lack distractors");
        for s in &mc.samples {
            let opts = s.meta.options.as_ref().unwrap();
            assert_eq!(opts.len(), 4);
            let mut d = opts.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 4);
            let gt = s.meta.gt_letter.unwrap();
            let src = vqa.iter().find(|v| Some(&v.instruction) == s.meta.question.as_ref()).unwrap();
            assert_eq!(opts.iter().filter(|o| **o == src.answer).count(), 1);
            assert_eq!(opts[(gt as u8 - b'A') as usize], src.answer);
            if src.instruction.starts_with("What color") {
                assert!(opts.iter().all(|o| COLORS.iter().any(|c| c.name == o)));
            }
        }
    }

    #[test]
    fn conversation_carries_transcript() {
        let s = scene(vec![
            obj(0, "chair", "red", [0.0; 3], [1.0; 3]),
            obj(1, "table", "brown", [3.0, 0.0, 0.0], [1.0; 3]),
        ]);
        let g = make_conversation(&s, 9, 2, 0);
        assert_eq!(g.samples.len(), 2);
        let (t0, t1) = (&g.samples[0], &g.samples[1]);
        assert!(t1.instruction.contains(&t0.instruction));
        assert!(t1.instruction.contains(&t0.answer));
        assert_eq!(t0.scene_id, t1.scene_id);
        assert_eq!(g, make_conversation(&s, 9, 2, 0));
    }
}
