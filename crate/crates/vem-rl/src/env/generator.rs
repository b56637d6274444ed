//! Seeded random generation of solvable GUI environments.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::Oracle;
use super::{
    reset, EnvError, EnvSpec, GoalPredicate, Nav, Rect, Screen, SimKey, Task,
    TransitionEntry, Widget, WidgetKind, ENV_VERSION,
};

// Row pitch matches a 7x7 click-template grid: row r spans the grid-cell
// center (r + 0.5) / 7, so every widget is reachable by some cell-center
// click.
const ROW_PITCH: f64 = 1.0 / 7.0;
const VISIBLE_ROWS: u8 = 6;
const MAX_ROWS: u8 = 7;
const GENERATION_RETRIES: u32 = 25;

const WORDS: [&str; 8] = [
    "alpha", "bravo", "cascade", "delta", "ember", "fjord", "garnet", "harbor",
];

const SCREEN_NAMES: [&str; 12] = [
    "search", "settings", "inbox", "maps", "store", "player", "gallery",
    "notes", "weather", "calendar", "contacts", "files",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Total screen count, ad screens included. Must be >= 2.
    pub screens: usize,
    pub tasks: usize,
    pub distractor_prob: f64,
    pub gamma: f64,
    pub history_k: usize,
    pub max_steps: u32,
    /// Fraction of tasks that require typing text into a field.
    pub typing_task_fraction: f64,
    /// Extra cross links added on top of the reachability tree.
    pub extra_links: usize,
    /// Probability that a content screen carries an ad widget (when ad
    /// screens exist).
    pub ad_widget_prob: f64,
    /// Probability that a goal screen's entry widget sits below the fold,
    /// requiring a scroll before it can be clicked.
    pub scroll_screen_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            screens: 10,
            tasks: 5,
            distractor_prob: 0.0,
            gamma: 0.95,
            history_k: 4,
            max_steps: 10,
            typing_task_fraction: 0.25,
            extra_links: 2,
            ad_widget_prob: 0.3,
            scroll_screen_prob: 0.0,
        }
    }
}

/// Generates an environment satisfying every `EnvSpec` invariant. Identical
/// `(config, seed)` yields a bit-identical spec. Each task is checked
/// solvable within its step budget via the oracle's shortest-path distance;
/// unsatisfiable layouts are regenerated up to a retry cap.
pub fn generate_env(config: &GeneratorConfig, seed: u64) -> Result<EnvSpec, EnvError> {
    if config.screens < 2 {
        return Err(EnvError::InvalidConfig(format!(
            "need at least 2 screens, got {}",
            config.screens
        )));
    }
    if config.tasks < 1 {
        return Err(EnvError::InvalidConfig("need at least 1 task".into()));
    }
    if !(0.0..=1.0).contains(&config.distractor_prob) {
        return Err(EnvError::InvalidConfig(format!(
            "distractor_prob out of range: {}",
            config.distractor_prob
        )));
    }
    if !(0.0..1.0).contains(&config.gamma) {
        return Err(EnvError::InvalidConfig(format!(
            "gamma must lie in [0,1): {}",
            config.gamma
        )));
    }

    let mut last_reason = String::new();
    for attempt in 0..GENERATION_RETRIES {
        let sub_seed = crate::util::derive_seed(seed, &format!("env-attempt-{attempt}"));
        let env = build_candidate(config, seed, sub_seed);
        match validate(&env, config) {
            Ok(()) => return Ok(env),
            Err(reason) => last_reason = reason,
        }
    }
    Err(EnvError::GenerationFailed {
        retries: GENERATION_RETRIES,
        reason: last_reason,
    })
}

fn row_rect(row: u8) -> Rect {
    let y0 = f64::from(row) * ROW_PITCH + 0.005;
    Rect { x0: 0.08, y0, x1: 0.92, y1: y0 + 0.13 }
}

fn build_candidate(config: &GeneratorConfig, seed: u64, sub_seed: u64) -> EnvSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    let n = config.screens;
    let n_ads = if config.distractor_prob > 0.0 && n >= 3 {
        if n >= 8 { 2 } else { 1 }
    } else {
        0
    };
    let n_content = n - n_ads;

    // Reachability tree over content screens; screen 0 is home.
    let mut parent = vec![0u32; n_content];
    let mut depth = vec![0u32; n_content];
    let max_depth = config.max_steps.saturating_sub(2).max(1);
    for i in 1..n_content {
        let p = loop {
            let cand = rng.gen_range(0..i) as u32;
            if depth[cand as usize] < max_depth {
                break cand;
            }
        };
        parent[i] = p;
        depth[i] = depth[p as usize] + 1;
    }

    let mut screens: Vec<Screen> = Vec::with_capacity(n);
    let mut transitions: Vec<TransitionEntry> = Vec::new();
    let mut next_widget_id = 0u32;
    let mut alloc_widget = |kind: WidgetKind, target: Option<u32>, row: u8| {
        let w = Widget { widget_id: next_widget_id, rect: row_rect(row), kind, target, row };
        next_widget_id += 1;
        w
    };

    // Children per content screen, for button layout.
    let mut children: Vec<Vec<u32>> = vec![Vec::new(); n_content];
    for i in 1..n_content {
        children[parent[i] as usize].push(i as u32);
    }

    let scrolled_screens: Vec<bool> = (0..n_content)
        .map(|i| i > 0 && rng.gen::<f64>() < config.scroll_screen_prob)
        .collect();

    for i in 0..n_content {
        let mut widgets = Vec::new();
        let mut row = 0u8;
        for child in &children[i] {
            let kind = if rng.gen::<f64>() < 0.5 { WidgetKind::Button } else { WidgetKind::Link };
            // On a "scrolled" screen the last child entry sits below the fold.
            let place_row = if scrolled_screens[i]
                && *child == *children[i].last().unwrap()
                && row < VISIBLE_ROWS
            {
                VISIBLE_ROWS
            } else {
                row
            };
            if place_row >= MAX_ROWS {
                break;
            }
            let w = alloc_widget(kind, Some(*child), place_row);
            transitions.push(TransitionEntry {
                screen: i as u32,
                nav: Nav::Click(w.widget_id),
                target: *child,
            });
            widgets.push(w);
            row = row.max(place_row) + 1;
        }
        screens.push(Screen {
            screen_id: i as u32,
            widgets,
            is_ad: false,
            max_scroll: 0,
            visible_rows: VISIBLE_ROWS,
        });
    }

    // Ad screens: only BACK/HOME leave them; clicking their ad banner stays.
    for a in 0..n_ads {
        let id = (n_content + a) as u32;
        let banner = alloc_widget(WidgetKind::Ad, None, 0);
        screens.push(Screen {
            screen_id: id,
            widgets: vec![banner],
            is_ad: true,
            max_scroll: 0,
            visible_rows: VISIBLE_ROWS,
        });
        transitions.push(TransitionEntry { screen: id, nav: Nav::Back, target: 0 });
    }

    // Back edges for content screens point at the tree parent.
    for i in 1..n_content {
        transitions.push(TransitionEntry {
            screen: i as u32,
            nav: Nav::Back,
            target: parent[i],
        });
    }

    // Extra cross links between content screens.
    for _ in 0..config.extra_links {
        if n_content < 3 {
            break;
        }
        let from = rng.gen_range(0..n_content);
        let to = rng.gen_range(1..n_content) as u32;
        let sc = &mut screens[from];
        let row = sc.widgets.iter().map(|w| w.row + 1).max().unwrap_or(0);
        if to as usize == from || row >= MAX_ROWS {
            continue;
        }
        let w = alloc_widget(WidgetKind::Link, Some(to), row);
        transitions.push(TransitionEntry {
            screen: from as u32,
            nav: Nav::Click(w.widget_id),
            target: to,
        });
        sc.widgets.push(w);
    }

    // Ad widgets on content screens, below existing rows.
    if n_ads > 0 {
        for i in 1..n_content {
            if rng.gen::<f64>() < config.ad_widget_prob {
                let ad_target = (n_content + rng.gen_range(0..n_ads)) as u32;
                let sc = &mut screens[i];
                let row = sc.widgets.iter().map(|w| w.row + 1).max().unwrap_or(0);
                if row >= MAX_ROWS {
                    continue;
                }
                let w = alloc_widget(WidgetKind::Ad, Some(ad_target), row);
                transitions.push(TransitionEntry {
                    screen: i as u32,
                    nav: Nav::Click(w.widget_id),
                    target: ad_target,
                });
                sc.widgets.push(w);
            }
        }
    }

    let mut max_scroll_needed = vec![0u8; n];
    for sc in &screens {
        for w in &sc.widgets {
            if w.row >= VISIBLE_ROWS {
                let need = w.row + 1 - VISIBLE_ROWS;
                max_scroll_needed[sc.screen_id as usize] =
                    max_scroll_needed[sc.screen_id as usize].max(need);
            }
        }
    }
    for sc in &mut screens {
        sc.max_scroll = max_scroll_needed[sc.screen_id as usize];
    }

    let text_vocab: Vec<String> = WORDS.iter().take(4).map(|s| s.to_string()).collect();

    // Tasks: navigate-to-screen or type-text-on-screen goals.
    let mut tasks = Vec::with_capacity(config.tasks);
    for t in 0..config.tasks {
        let goal_screen = if n_content > 1 {
            rng.gen_range(1..n_content) as u32
        } else {
            0
        };
        let name = SCREEN_NAMES[goal_screen as usize % SCREEN_NAMES.len()];
        let typing = rng.gen::<f64>() < config.typing_task_fraction && n_content > 1;
        if typing {
            // Goal screen needs a textfield.
            let sc = &mut screens[goal_screen as usize];
            let has_field = sc.widgets.iter().any(|w| w.kind == WidgetKind::Textfield);
            let row = sc.widgets.iter().map(|w| w.row + 1).max().unwrap_or(0);
            if !has_field && row < MAX_ROWS {
                let w = alloc_widget(WidgetKind::Textfield, None, row);
                sc.widgets.push(w);
            }
            let word = text_vocab[rng.gen_range(0..text_vocab.len())].clone();
            tasks.push(Task {
                task_id: format!("t{t}"),
                instruction: format!("Type '{word}' into the field on the {name} screen"),
                goal: GoalPredicate { screen: goal_screen, requires_text: Some(word) },
                max_steps: config.max_steps,
            });
        } else {
            tasks.push(Task {
                task_id: format!("t{t}"),
                instruction: format!("Open the {name} screen"),
                goal: GoalPredicate { screen: goal_screen, requires_text: None },
                max_steps: config.max_steps,
            });
        }
    }

    transitions.sort_by(|a, b| (a.screen, a.nav).cmp(&(b.screen, b.nav)));

    EnvSpec {
        env_version: ENV_VERSION,
        env_id: format!("env-{seed}"),
        screens,
        tasks,
        transitions,
        home_screen: 0,
        distractor_prob: config.distractor_prob,
        gamma: config.gamma,
        history_k: config.history_k,
        text_vocab,
        seed,
    }
}

fn validate(env: &EnvSpec, config: &GeneratorConfig) -> Result<(), String> {
    // Structural invariants.
    let n = env.screens.len() as u32;
    for e in &env.transitions {
        if e.screen >= n || e.target >= n {
            return Err(format!("transition references missing screen: {e:?}"));
        }
    }
    for sc in &env.screens {
        for (i, a) in sc.widgets.iter().enumerate() {
            if a.rect.x0 < 0.0 || a.rect.y0 < 0.0 || a.rect.x1 > 1.0 || a.rect.y1 > 1.0 {
                return Err(format!("widget rect out of bounds on screen {}", sc.screen_id));
            }
            for b in sc.widgets.iter().skip(i + 1) {
                if a.rect.overlaps(&b.rect) {
                    return Err(format!("overlapping widgets on screen {}", sc.screen_id));
                }
            }
        }
        if sc.is_ad && env.transition(sc.screen_id, Nav::Back).is_none() {
            return Err(format!("ad screen {} lacks PRESS_BACK", sc.screen_id));
        }
    }

    // Solvability: shortest-path distance from reset within max_steps.
    let oracle = Oracle::build(env);
    for task in &env.tasks {
        let start = reset(env, &task.task_id).map_err(|e| e.to_string())?;
        let key = SimKey::of_state(task, &start);
        match oracle.distance(&task.task_id, &key) {
            Some(d) if d <= config.max_steps => {}
            Some(d) => {
                return Err(format!(
                    "task {} needs {} steps, budget {}",
                    task.task_id, d, config.max_steps
                ))
            }
            None => return Err(format!("task {} unsolvable", task.task_id)),
        }
    }
    Ok(())
}
