//! Hand-built fixture environments shared by the integration tests.

#![allow(dead_code)]

use vem_rl::env::{
    EnvSpec, GoalPredicate, Nav, Rect, Screen, Task, TransitionEntry, Widget, WidgetKind,
    ENV_VERSION,
};

pub fn row_rect(row: u8) -> Rect {
    let y0 = f64::from(row) / 7.0 + 0.005;
    Rect { x0: 0.08, y0, x1: 0.92, y1: y0 + 0.13 }
}

fn button(widget_id: u32, target: u32, row: u8) -> Widget {
    Widget { widget_id, rect: row_rect(row), kind: WidgetKind::Button, target: Some(target), row }
}

/// Two screens: home has one button to the goal screen. One task: reach
/// screen 1. No distractors.
pub fn two_screen_env() -> EnvSpec {
    EnvSpec {
        env_version: ENV_VERSION,
        env_id: "fixture-2".into(),
        screens: vec![
            Screen {
                screen_id: 0,
                widgets: vec![button(0, 1, 0)],
                is_ad: false,
                max_scroll: 0,
                visible_rows: 6,
            },
            Screen {
                screen_id: 1,
                widgets: vec![],
                is_ad: false,
                max_scroll: 0,
                visible_rows: 6,
            },
        ],
        tasks: vec![Task {
            task_id: "t0".into(),
            instruction: "Open the target screen".into(),
            goal: GoalPredicate { screen: 1, requires_text: None },
            max_steps: 10,
        }],
        transitions: vec![
            TransitionEntry { screen: 0, nav: Nav::Click(0), target: 1 },
            TransitionEntry { screen: 1, nav: Nav::Back, target: 0 },
        ],
        home_screen: 0,
        distractor_prob: 0.0,
        gamma: 0.95,
        history_k: 4,
        text_vocab: vec!["alpha".into(), "bravo".into()],
        seed: 0,
    }
}

/// Three screens in a chain 0 -> 1 -> 2; the task is to reach screen 2.
pub fn chain3_env() -> EnvSpec {
    EnvSpec {
        env_version: ENV_VERSION,
        env_id: "fixture-chain3".into(),
        screens: vec![
            Screen {
                screen_id: 0,
                widgets: vec![button(0, 1, 0)],
                is_ad: false,
                max_scroll: 0,
                visible_rows: 6,
            },
            Screen {
                screen_id: 1,
                widgets: vec![button(1, 2, 0)],
                is_ad: false,
                max_scroll: 0,
                visible_rows: 6,
            },
            Screen {
                screen_id: 2,
                widgets: vec![],
                is_ad: false,
                max_scroll: 0,
                visible_rows: 6,
            },
        ],
        tasks: vec![Task {
            task_id: "t0".into(),
            instruction: "Open the last screen".into(),
            goal: GoalPredicate { screen: 2, requires_text: None },
            max_steps: 10,
        }],
        transitions: vec![
            TransitionEntry { screen: 0, nav: Nav::Click(0), target: 1 },
            TransitionEntry { screen: 1, nav: Nav::Click(1), target: 2 },
            TransitionEntry { screen: 1, nav: Nav::Back, target: 0 },
            TransitionEntry { screen: 2, nav: Nav::Back, target: 1 },
        ],
        home_screen: 0,
        distractor_prob: 0.0,
        gamma: 0.95,
        history_k: 4,
        text_vocab: vec!["alpha".into()],
        seed: 0,
    }
}

/// Single screen whose goal is already satisfied at reset.
pub fn satisfied_env() -> EnvSpec {
    EnvSpec {
        env_version: ENV_VERSION,
        env_id: "fixture-satisfied".into(),
        screens: vec![Screen {
            screen_id: 0,
            widgets: vec![],
            is_ad: false,
            max_scroll: 0,
            visible_rows: 6,
        }],
        tasks: vec![Task {
            task_id: "t0".into(),
            instruction: "Stay here".into(),
            goal: GoalPredicate { screen: 0, requires_text: None },
            max_steps: 10,
        }],
        transitions: vec![],
        home_screen: 0,
        distractor_prob: 0.0,
        gamma: 0.95,
        history_k: 4,
        text_vocab: vec!["alpha".into()],
        seed: 0,
    }
}

/// Content screen with an ad widget leading to an ad screen.
pub fn ad_env() -> EnvSpec {
    EnvSpec {
        env_version: ENV_VERSION,
        env_id: "fixture-ad".into(),
        screens: vec![
            Screen {
                screen_id: 0,
                widgets: vec![
                    button(0, 1, 0),
                    Widget {
                        widget_id: 1,
                        rect: row_rect(1),
                        kind: WidgetKind::Ad,
                        target: Some(2),
                        row: 1,
                    },
                ],
                is_ad: false,
                max_scroll: 0,
                visible_rows: 6,
            },
            Screen {
                screen_id: 1,
                widgets: vec![],
                is_ad: false,
                max_scroll: 0,
                visible_rows: 6,
            },
            Screen {
                screen_id: 2,
                widgets: vec![Widget {
                    widget_id: 2,
                    rect: row_rect(0),
                    kind: WidgetKind::Ad,
                    target: None,
                    row: 0,
                }],
                is_ad: true,
                max_scroll: 0,
                visible_rows: 6,
            },
        ],
        tasks: vec![Task {
            task_id: "t0".into(),
            instruction: "Open the target screen".into(),
            goal: GoalPredicate { screen: 1, requires_text: None },
            max_steps: 10,
        }],
        transitions: vec![
            TransitionEntry { screen: 0, nav: Nav::Click(0), target: 1 },
            TransitionEntry { screen: 0, nav: Nav::Click(1), target: 2 },
            TransitionEntry { screen: 1, nav: Nav::Back, target: 0 },
            TransitionEntry { screen: 2, nav: Nav::Back, target: 0 },
        ],
        home_screen: 0,
        distractor_prob: 0.2,
        gamma: 0.95,
        history_k: 4,
        text_vocab: vec!["alpha".into()],
        seed: 0,
    }
}

/// Two screens where the goal screen carries a textfield and the task
/// requires typing "alpha" into it.
pub fn typing_env() -> EnvSpec {
    EnvSpec {
        env_version: ENV_VERSION,
        env_id: "fixture-typing".into(),
        screens: vec![
            Screen {
                screen_id: 0,
                widgets: vec![button(0, 1, 0)],
                is_ad: false,
                max_scroll: 0,
                visible_rows: 6,
            },
            Screen {
                screen_id: 1,
                widgets: vec![Widget {
                    widget_id: 1,
                    rect: row_rect(0),
                    kind: WidgetKind::Textfield,
                    target: None,
                    row: 0,
                }],
                is_ad: false,
                max_scroll: 0,
                visible_rows: 6,
            },
        ],
        tasks: vec![Task {
            task_id: "t0".into(),
            instruction: "Type 'alpha' into the field".into(),
            goal: GoalPredicate { screen: 1, requires_text: Some("alpha".into()) },
            max_steps: 10,
        }],
        transitions: vec![
            TransitionEntry { screen: 0, nav: Nav::Click(0), target: 1 },
            TransitionEntry { screen: 1, nav: Nav::Back, target: 0 },
        ],
        home_screen: 0,
        distractor_prob: 0.0,
        gamma: 0.95,
        history_k: 4,
        text_vocab: vec!["alpha".into(), "bravo".into()],
        seed: 0,
    }
}
