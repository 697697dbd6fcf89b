"""Teach a DQN agent to dodge a roadblock and score it against the exact planner.

The agent sees (d1, d2, v, x, y) and picks keep-lane or change-lane each
step. The planner solves each episode by backward induction, so its return
is the ceiling; a coin-flip policy is the floor.

    python3 demos/04_traffic_dqn.py --episodes 1000
"""
import argparse

from semlink import dqn
from semlink.traffic import HighwayConfig, OraclePolicy, RandomPolicy, evaluate_policy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=1000)
    ap.add_argument("--eval-decisions", type=int, default=900)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="save the trained agent here")
    args = ap.parse_args()

    sim = HighwayConfig()
    qnet, hist = dqn.train_agent(dqn.AgentConfig(episodes=args.episodes), sim, seed=args.seed)
    window = max(1, args.episodes // 10)
    for start in range(0, args.episodes, window):
        chunk = hist.episodes[start:start + window]
        mean = sum(e.ret for e in chunk) / len(chunk)
        print(f"  episodes {start:5d}-{start + len(chunk) - 1:<5d} mean return {mean:7.3f}  "
              f"epsilon {chunk[-1].epsilon:.3f}")
    print(f"{hist.updates} gradient updates, {hist.syncs} target syncs")

    agent = evaluate_policy(dqn.GreedyPolicy(qnet, sim), sim, seed=1, n_decisions=args.eval_decisions)
    oracle = evaluate_policy(OraclePolicy(), sim, seed=1, n_episodes=agent.episodes)
    rand = evaluate_policy(RandomPolicy(7), sim, seed=1, n_episodes=agent.episodes)
    for name, res in (("agent", agent), ("planner", oracle), ("random", rand)):
        print(f"{name:8s} {res.summary()}")

    if args.out:
        dqn.save_agent(qnet, args.out)
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
