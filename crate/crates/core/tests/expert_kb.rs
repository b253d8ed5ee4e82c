use abil::expert::{generate_dataset, rollout};
use abil::grid::{manhattan, Split, Task, TaskConfig};
use abil::symbolic::trajectory_satisfies;

const TASKS: [Task; 5] = [Task::Goto, Task::Pickup, Task::Open, Task::Put, Task::Unlock];

#[test]
fn expert_trajectories_satisfy_their_machine() {
    for task in TASKS {
        for split in [Split::Basic, Split::Generalization] {
            for seed in 0..100 {
                let t = rollout(&TaskConfig::new(task, split, seed)).unwrap();
                let machine = t.states[0].bound_machine();
                let tracked = machine.tracked_atoms();
                let z: Vec<_> = t.states.iter().map(|s| s.true_atoms(&tracked)).collect();
                assert!(trajectory_satisfies(&machine, &z), "{task} {split} seed {seed}: {z:?}");
            }
        }
    }
}

#[test]
fn expert_length_bound() {
    // Navigation lower bound: Manhattan distance from the agent to a cell beside each waypoint.
    for task in TASKS {
        for seed in 0..200 {
            let t = rollout(&TaskConfig::new(task, Split::Basic, seed)).unwrap();
            let s0 = &t.states[0];
            let mut pos = s0.agent_pos;
            let mut lower = 0;
            for role in ["ball", "key", "box", "door"] {
                if let Some(o) = s0.target(role) {
                    lower += (manhattan(pos, o.pos) - 1).max(0);
                    pos = o.pos;
                }
            }
            let overhead = 4 * s0.bound_machine().edges.len() as i32;
            assert!((t.len() as i32) <= 2 * lower + overhead, "{task} seed {seed}: len {} lower {lower}", t.len());
        }
    }
}

#[test]
fn mean_lengths_match_reported_averages() {
    let goto = generate_dataset(&TaskConfig::new(Task::Goto, Split::Basic, 0), 1000).unwrap();
    let unlock = generate_dataset(&TaskConfig::new(Task::Unlock, Split::Basic, 0), 1000).unwrap();
    for t in [Task::Pickup, Task::Open, Task::Put] {
        let d = generate_dataset(&TaskConfig::new(t, Split::Basic, 0), 1000).unwrap();
        println!("{t}: mean length {:.2}", d.mean_length());
    }
    println!("goto {:.2} unlock {:.2}", goto.mean_length(), unlock.mean_length());
    assert!((goto.mean_length() - 3.0).abs() <= 2.0, "goto mean {}", goto.mean_length());
    assert!((unlock.mean_length() - 10.0).abs() <= 3.0, "unlock mean {}", unlock.mean_length());
}
