#!/usr/bin/env python3
"""
Demo script for the Caption-Flow Lab
This script walks through every module at toy scale without the Streamlit UI
"""
import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))


def demo_synthetic_world():
    """Demonstrate scene sampling, rendering and latent encoding"""
    print("🔊 Demo: Synthetic Audio World")
    print("-" * 30)

    try:
        from backend.synthworld import GrammarConfig, LatentConfig, Vocabulary, generate_records

        vocab = Vocabulary.load()
        records = generate_records(40, seed=7, grammar=GrammarConfig(), latent_cfg=LatentConfig(), vocab=vocab)
        for record in records[:3]:
            print(f"✅ {record.record_id}: '{record.original.text}' latent {record.latent.shape}")
        return records, vocab

    except Exception as e:
        print(f"❌ Error in synthetic world demo: {e}")
        return None, None


def demo_caption_augmentation(records, vocab):
    """Demonstrate rule-set selection and caption enrichment"""
    print("\n✍️ Demo: Caption Augmentation")
    print("-" * 30)

    try:
        from backend.captionaug import FidelityScorer, augment_records, load_rulesets, select_ruleset
        from backend.rewriters import RuleBasedRewriter

        rulesets = load_rulesets()
        client = RuleBasedRewriter()
        subset = [(r.scene, r.original) for r in records[:10]]
        best = select_ruleset(rulesets, subset, client, FidelityScorer(vocab))
        ruleset = next(rs for rs in rulesets if rs.ruleset_id == best)
        print(f"✅ Selected rule set: {best}")
        enriched = augment_records(records, ruleset, client, vocab)
        for record in enriched[:2]:
            print(f"   {record.original.text!r} -> {record.enriched.text!r}")
        return enriched

    except Exception as e:
        print(f"❌ Error in caption augmentation demo: {e}")
        return None


def demo_metrics():
    """Demonstrate the Frechet and KL primitives and group advantages"""
    print("\n📏 Demo: Metric Primitives")
    print("-" * 30)

    try:
        import numpy as np

        from backend.grpo import advantages
        from backend.rlrewards import frechet, kl_div

        print(f"✅ Frechet(N(0,I), N(1,I)) in 1-D: {frechet([0.0], [[1.0]], [1.0], [[1.0]]):.6f}")
        print(f"✅ KL((.5,.5) || (.25,.75)): {kl_div([0.5, 0.5], [0.25, 0.75]):.4f} nats")
        print(f"✅ Advantages of rewards (1, 2, 3): {np.round(advantages([1.0, 2.0, 3.0]), 4)}")
        return True

    except Exception as e:
        print(f"❌ Error in metrics demo: {e}")
        return False


def demo_flow_and_policy(records):
    """Demonstrate ODE/SDE sampling and trajectory likelihoods with an untrained net"""
    print("\n🌊 Demo: Flow Sampling and Policy Likelihood")
    print("-" * 30)

    try:
        import numpy as np

        from backend.encoders import LatentScaler
        from backend.flowmatch import FlowConfig, init_velocity_net, sample_ode, sample_sde, traj_logprob
        from backend.synthworld import latent_matrix
        from backend.tensorkit import RngStream

        scaler = LatentScaler.fit(latent_matrix(records))
        net = init_velocity_net(scaler.dim, 4, RngStream(0, "demo/net"), hidden=(16,), scaler=scaler)
        cond = np.full(4, 0.5)
        ode = sample_ode(net, cond, FlowConfig(steps=8, sigma=0.0), RngStream(1, "demo"))
        sde = sample_sde(net, cond, FlowConfig(steps=8, sigma=0.0), RngStream(1, "demo"))
        print(f"✅ sigma=0 SDE matches ODE: {np.array_equal(ode, sde.final)}")
        noisy = sample_sde(net, cond, FlowConfig(steps=8, sigma=0.25), RngStream(2, "demo"))
        print(f"✅ Trajectory log-probability: {traj_logprob(net, noisy):.3f}")
        return True

    except Exception as e:
        print(f"❌ Error in flow demo: {e}")
        return False


def demo_evaluation(records, vocab):
    """Demonstrate the evaluation report with untrained encoders"""
    print("\n📊 Demo: Evaluation Report")
    print("-" * 30)

    try:
        from backend.bench import NoiseGenerator, OracleGenerator, evaluate, format_table
        from backend.encoders import ClassifierHyper, DualHyper, LatentScaler, init_classifier, init_dual
        from backend.synthworld import latent_matrix
        from backend.tensorkit import RngStream

        scaler = LatentScaler.fit(latent_matrix(records))
        classifier = init_classifier(scaler.dim, ClassifierHyper(hidden=(8, 4)), RngStream(0, "demo/clf"), scaler)
        dual = init_dual(vocab.size, scaler.dim, DualHyper(embed_dim=8, batch_size=8), RngStream(0, "demo/dual"), scaler)
        reports = [
            evaluate(OracleGenerator(), records, dual, classifier, n_boot=20),
            evaluate(NoiseGenerator(scaler, seed=0), records, dual, classifier, n_boot=20),
        ]
        print(format_table(reports))
        return reports

    except Exception as e:
        print(f"❌ Error in evaluation demo: {e}")
        return None


def main():
    """Main demo function"""
    print("🎬 Caption-Flow Lab Demo")
    print("=" * 50)
    print("This demo showcases the core functionality of the lab")
    print("without requiring the Streamlit UI.\n")

    records, vocab = demo_synthetic_world()
    if not records:
        print("❌ Demo failed at dataset stage")
        return

    enriched = demo_caption_augmentation(records, vocab)
    if not enriched:
        print("❌ Demo failed at caption augmentation stage")
        return

    demo_metrics()
    demo_flow_and_policy(enriched)
    demo_evaluation(enriched, vocab)

    print("\n" + "=" * 50)
    print("🎉 Demo completed successfully!")
    print("=" * 50)
    print("\nTo run the full pipeline:")
    print("  python run.py pipeline --out artifacts/run0")
    print("\nTo open the dashboard:")
    print("  python run.py app")
    print("  or")
    print("  streamlit run app.py")


if __name__ == "__main__":
    main()
