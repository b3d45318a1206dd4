//! Reference executions driven by interrupt schedules.
//!
//! The only nondeterminism in a u8k system is *when* the timer fires, so
//! a concrete run is fully determined by a [`Schedule`]: a reset followed
//! by timer events, each saying how many user-mode instructions execute
//! before the interrupt. Traces produced here are ground truth for
//! validating the analyzer: every recorded state must be contained in
//! the abstraction computed for the corresponding program point.

use super::image::EntryPoints;
use super::state::{ConcreteState, FaultKind, Mode, StepEvent};

/// One schedule entry. Timer events before the first `Reset` are ignored
/// (the machine is not running yet).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    /// Cold boot: memory reloaded from the images, registers cleared.
    Reset,
    /// Let `after` user-mode instructions execute, then raise the timer
    /// interrupt at the next instruction boundary in user mode.
    Timer { after: u8 },
}

pub type Schedule = Vec<Event>;

/// Why a trace ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOutcome {
    /// All events consumed; the trace ends at the kernel exit following
    /// the last event (inclusive).
    ScheduleExhausted,
    Faulted(FaultKind),
    Halted,
    StepLimit,
}

/// Every machine state visited, in order, plus the reason the run ended.
#[derive(Debug, Clone)]
pub struct Trace {
    pub states: Vec<ConcreteState>,
    pub outcome: TraceOutcome,
}

struct Runner {
    mem0: [u8; 256],
    vectors: EntryPoints,
    state: ConcreteState,
    states: Vec<ConcreteState>,
    steps: usize,
    max_steps: usize,
}

impl Runner {
    /// Single step with recording. `Ok(())` while the run may continue.
    fn step(&mut self) -> Result<(), TraceOutcome> {
        if self.steps >= self.max_steps {
            return Err(TraceOutcome::StepLimit);
        }
        let ev = self.state.step();
        self.steps += 1;
        self.states.push(self.state.clone());
        match ev {
            StepEvent::Executed(_) => Ok(()),
            StepEvent::Halted => Err(TraceOutcome::Halted),
            StepEvent::Faulted(f) => Err(TraceOutcome::Faulted(f)),
            StepEvent::Stopped => unreachable!("stepping a stopped machine"),
        }
    }

    /// Run kernel code until control is back in user mode.
    fn run_until_user(&mut self) -> Result<(), TraceOutcome> {
        while self.state.mode == Mode::Kernel {
            self.step()?;
        }
        Ok(())
    }

    fn run(&mut self, schedule: &[Event]) -> TraceOutcome {
        let mut started = false;
        for &event in schedule {
            let r = match event {
                Event::Reset => {
                    self.state = ConcreteState::new(self.mem0, self.vectors);
                    if started {
                        self.states.push(self.state.clone());
                    }
                    started = true;
                    self.run_until_user()
                }
                Event::Timer { after } if started => self.timer(after),
                Event::Timer { .. } => Ok(()),
            };
            if let Err(outcome) = r {
                return outcome;
            }
        }
        TraceOutcome::ScheduleExhausted
    }

    fn timer(&mut self, after: u8) -> Result<(), TraceOutcome> {
        let mut executed = 0;
        while executed < after {
            let was_user = self.state.mode == Mode::User;
            self.step()?;
            if was_user {
                executed += 1;
            }
        }
        // The interrupt fires at an instruction boundary in user mode; if
        // the last counted instruction trapped into the kernel, wait for
        // the exit first.
        self.run_until_user()?;
        self.state.deliver_timer();
        self.states.push(self.state.clone());
        self.run_until_user()
    }
}

/// Execute `schedule` against the loaded system and record every state,
/// starting from the power-on state. An empty schedule yields just the
/// power-on state.
pub fn run_oracle(
    mem: [u8; 256],
    vectors: EntryPoints,
    schedule: &[Event],
    max_steps: usize,
) -> Trace {
    let state = ConcreteState::new(mem, vectors);
    let mut runner = Runner {
        mem0: mem,
        vectors,
        states: vec![state.clone()],
        state,
        steps: 0,
        max_steps,
    };
    let outcome = runner.run(schedule);
    Trace {
        states: runner.states,
        outcome,
    }
}
