# test_cli.py
"""
Unit tests for the treeband command line.
Drives main() in-process and checks exit codes and artifacts.
"""

import contextlib
import io
import json
import os
import shutil
import tempfile
import unittest

import pandas as pd

from treeband import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

HERE = os.path.dirname(os.path.abspath(__file__))
TABLE1 = os.path.join(HERE, 'table1.rules')
OF1_STATS = os.path.join(HERE, 'of1_1000_stats.csv')


def run(*argv):
    """Run the CLI, return (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


class TestExitCodes(unittest.TestCase):
    """Test usage and data errors."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_version(self):
        """Test --version exits cleanly."""
        code, out, _ = run('--version')
        self.assertEqual(code, EXIT_OK)
        self.assertIn('treeband', out)

    def test_no_command(self):
        """Test bare invocation is a usage error."""
        self.assertEqual(run()[0], EXIT_USAGE)

    def test_unknown_flag(self):
        """Test unknown flag is a usage error, not argparse's exit 2."""
        code, _, err = run('inspect', '--ruleset', TABLE1, '--bogus')
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn('unrecognized', err)

    def test_bad_config_override(self):
        """Test unknown key and bad value in --set."""
        self.assertEqual(run('inspect', '--ruleset', TABLE1, '--set', 'nope=1')[0], EXIT_USAGE)
        self.assertEqual(run('inspect', '--ruleset', TABLE1, '--set', 'train.minibatch=lots')[0], EXIT_USAGE)
        self.assertEqual(run('inspect', '--ruleset', TABLE1, '--c', '1.5')[0], EXIT_USAGE)

    def test_bad_ruleset(self):
        """Test unparseable ruleset is a data error."""
        path = os.path.join(self.temp_dir, 'bad.rules')
        with open(path, 'w') as f:
            f.write("tp_dst=80 action=ok\nnw_src=10.0.0.1/8 action=bad\n")
        code, _, err = run('inspect', '--ruleset', path, '-q')
        self.assertEqual(code, EXIT_DATA)
        self.assertIn('Error', err)

    def test_missing_ruleset(self):
        """Test missing file is a data error."""
        code, _, _ = run('inspect', '--ruleset', os.path.join(self.temp_dir, 'none.rules'), '-q')
        self.assertEqual(code, EXIT_DATA)

    def test_half_custom_plan(self):
        """Test --subset-a without --subset-b."""
        code, _, _ = run('decompose', '--subset-a', 'nw_src', '-q')
        self.assertEqual(code, EXIT_USAGE)

    def test_unknown_metric(self):
        """Test an unknown --metric is a usage error."""
        code, _, err = run('decompose', '--ruleset', TABLE1, '--metric', 'entropy', '-q')
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn('entropy', err)
        self.assertEqual(run('build', '--ruleset', TABLE1, '--metric', 'custom',
                             '--out', os.path.join(self.temp_dir, 'e.json'), '-q')[0], EXIT_USAGE)

    def test_unknown_bench_scheme(self):
        """Test an unknown scheme in --schemes is a usage error."""
        code, _, err = run('bench', '--rulesets', TABLE1, '--schemes', 'sd,bogus', '--workers', '1', '-q')
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn('bogus', err)

    def test_malformed_plan(self):
        """Test a plan file missing its subsets is a data error, not a traceback."""
        plan = os.path.join(self.temp_dir, 'plan.json')
        with open(plan, 'w') as f:
            json.dump({'scheme': 'SD'}, f)
        code, _, err = run('build', '--ruleset', TABLE1, '--plan', plan,
                           '--out', os.path.join(self.temp_dir, 'e.json'), '-q')
        self.assertEqual(code, EXIT_DATA)
        self.assertIn("missing key 'subset_a'", err)

    def test_malformed_engine(self):
        """Test an engine dump that is a JSON list is a data error."""
        engine = os.path.join(self.temp_dir, 'engine.json')
        with open(engine, 'w') as f:
            json.dump([], f)
        trace = os.path.join(self.temp_dir, 'trace.csv')
        run('generate', '--rules', '10', '--packets', '5', '--out-rules', os.path.join(self.temp_dir, 'r.rules'),
            '--out-trace', trace, '-q')
        self.assertEqual(run('classify', '--engine', engine, '--trace', trace, '-q')[0], EXIT_DATA)


class TestSubcommands(unittest.TestCase):
    """Test subcommand outputs."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def path(self, name):
        return os.path.join(self.temp_dir, name)

    def test_inspect_csv_with_echo(self):
        """Test stats CSV starts with the config echo."""
        code, _, _ = run('inspect', '--ruleset', TABLE1, '--out', self.path('stats.csv'), '--seed', '9', '-q')
        self.assertEqual(code, EXIT_OK)
        with open(self.path('stats.csv')) as f:
            text = f.read()
        self.assertTrue(text.startswith('# '))
        self.assertIn('# seed=9\n', text)
        df = pd.read_csv(self.path('stats.csv'), comment='#')
        self.assertEqual(len(df), 10)

    def test_inspect_stdout(self):
        """Test stats go to stdout without --out."""
        code, out, _ = run('inspect', '--ruleset', TABLE1, '-q')
        self.assertEqual(code, EXIT_OK)
        self.assertIn('field,sd,variance,di,rank_sd,rank_di', out)

    def test_decompose_from_stats(self):
        """Test OF1_1000 stats fixture through the CLI."""
        code, _, _ = run('decompose', '--stats', OF1_STATS, '--metric', 'sd', '--out', self.path('plan.json'), '-q')
        self.assertEqual(code, EXIT_OK)
        with open(self.path('plan.json')) as f:
            plan = json.load(f)
        self.assertEqual(set(plan['subset_a']), {'nw_src', 'tp_dst', 'ip_proto', 'dl_src', 'in_port'})
        self.assertEqual(set(plan['residual']), {'vlan_priority', 'ip_tos'})

    def test_decompose_custom_stdout(self):
        """Test explicit subsets printed as JSON."""
        code, out, _ = run('decompose', '--subset-a', 'tp_src', '--subset-b', 'tp_dst', '-q')
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(json.loads(out)['subset_b'], ['tp_dst'])

    def test_generate_build_classify(self):
        """Test the offline/online flow end to end with full agreement."""
        rules, trace = self.path('syn.rules'), self.path('syn.csv')
        engine, results = self.path('engine.json'), self.path('results.csv')
        self.assertEqual(run('generate', '--rules', '80', '--packets', '300', '--out-rules', rules,
                             '--out-trace', trace, '--seed', '5', '-q')[0], EXIT_OK)
        self.assertEqual(run('build', '--ruleset', rules, '--metric', 'di', '--leaf-threshold', '8',
                             '--out', engine, '-q')[0], EXIT_OK)
        code, _, err = run('classify', '--engine', engine, '--trace', trace, '--out', results)
        self.assertEqual(code, EXIT_OK)
        self.assertIn('agreement 100.00%', err)
        df = pd.read_csv(results, comment='#')
        self.assertEqual(len(df), 300)
        self.assertTrue(df['agree'].all())

    def test_train_one_subset(self):
        """Test a tiny training run leaves its checkpoint and curve."""
        rules = self.path('small.rules')
        run('generate', '--rules', '30', '--out-rules', rules, '-q')
        out = self.path('run')
        code, _, _ = run('train', '--ruleset', rules, '--metric', 'random1', '--subset', 'a',
                         '--leaf-threshold', '8', '--workers', '1', '--out', out, '-q',
                         '--set', 'train.hidden_sizes=8',
                         '--set', 'train.max_timesteps_total=40',
                         '--set', 'train.max_timesteps_per_batch=20',
                         '--set', 'train.max_timesteps_per_rollout=20',
                         '--set', 'train.minibatch=16',
                         '--set', 'train.sgd_iters_per_batch=1')
        self.assertEqual(code, EXIT_OK)
        for name in ('plan.json', 'policy_a.npz', 'curve_a.csv', 'best_tree_a.json'):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)

    def test_bench_with_output_dir(self):
        """Test bench over one generated ruleset writes its tables."""
        rules = self.path('one.rules')
        run('generate', '--rules', '50', '--out-rules', rules, '-q')
        out = self.path('bench')
        code, stdout, _ = run('bench', '--rulesets', rules, '--schemes', 'sd,random1',
                              '--leaf-threshold', '8', '--workers', '1', '--out', out, '-q')
        self.assertEqual(code, EXIT_OK)
        self.assertIn('Tree depth', stdout)
        rows = pd.read_csv(os.path.join(out, 'bench_rows.csv'), comment='#')
        self.assertEqual(list(rows['scheme']), ['SD', 'Random1'])

    def test_bench_all_failed(self):
        """Test every cell failing is a data error."""
        code, _, _ = run('bench', '--rulesets', self.path('missing.rules'), '--workers', '1', '-q')
        self.assertEqual(code, EXIT_DATA)


if __name__ == '__main__':
    unittest.main(verbosity=2)
