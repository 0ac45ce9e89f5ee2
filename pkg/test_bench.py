# test_bench.py
"""
Unit tests for bench.py module.
Small synthetic rulesets, baseline builder only.
"""

import os
import shutil
import tempfile
import unittest

import pandas as pd

from bench import (
    DEFAULT_SCHEMES,
    BenchRow,
    delta_table,
    expand_rulesets,
    report,
    rows_frame,
    run_bench,
)
from config import AppConfig
from ruleset import generate_synthetic, save_ruleset


class TestRunBench(unittest.TestCase):
    """Test the per-cell loop."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.config = AppConfig(leaf_threshold=8, seed=3)
        self.rulesets = [('syn_a', generate_synthetic(21, 60, name='syn_a'))]

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_one_row_per_scheme(self):
        """Test 1 ruleset x 4 schemes, ruleset-major order."""
        rows = run_bench(self.rulesets, DEFAULT_SCHEMES, config=self.config)
        self.assertEqual([r.scheme for r in rows], list(DEFAULT_SCHEMES))
        for r in rows:
            self.assertTrue(r.ok, r.error)
            self.assertEqual(r.worst_case, max(r.depth_a, r.depth_b))
            self.assertEqual(r.rules, 60)
            self.assertEqual(r.seed, 3)
            self.assertGreater(r.bytes_a, 0)

    def test_scheme_names_normalized(self):
        """Test lower-case scheme names."""
        rows = run_bench(self.rulesets, ['sd', 'random1'], config=self.config)
        self.assertEqual([r.scheme for r in rows], ['SD', 'Random1'])

    def test_rows_csv_bit_identical(self):
        """Test two runs write the same bench_rows.csv."""
        texts = []
        for run in ('one', 'two'):
            out = os.path.join(self.temp_dir, run)
            run_bench(self.rulesets, ['SD', 'DI'], config=self.config, out_dir=out)
            with open(os.path.join(out, 'bench_rows.csv')) as f:
                texts.append(f.read())
            self.assertTrue(os.path.exists(os.path.join(out, 'bench_timing.csv')))
        self.assertEqual(texts[0], texts[1])
        self.assertTrue(texts[0].startswith('# '))
        self.assertNotIn('wall_clock', texts[0])

    def test_missing_file_becomes_error_rows(self):
        """Test unreadable ruleset gives one error row per scheme, others still run."""
        good = os.path.join(self.temp_dir, 'good.rules')
        save_ruleset(good, generate_synthetic(22, 40))
        missing = os.path.join(self.temp_dir, 'missing.rules')
        rows = run_bench([missing, good], ['SD', 'Random2'], config=self.config)
        self.assertEqual([(r.ruleset, r.ok) for r in rows],
                         [('missing', False), ('missing', False), ('good', True), ('good', True)])
        self.assertIn('FileNotFoundError', rows[0].error)

    def test_expand_rulesets(self):
        """Test globs sorted and de-duplicated, literal paths kept."""
        for name in ('b.rules', 'a.rules'):
            save_ruleset(os.path.join(self.temp_dir, name), generate_synthetic(1, 5))
        pattern = os.path.join(self.temp_dir, '*.rules')
        paths = expand_rulesets([pattern, pattern, 'nowhere.rules'])
        self.assertEqual([os.path.basename(p) for p in paths], ['a.rules', 'b.rules', 'nowhere.rules'])


class TestReport(unittest.TestCase):
    """Test summary tables."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.rows = [
            BenchRow('r1', 'SD', depth_a=4, depth_b=3, worst_case=4, bytes_a=100, bytes_b=900),
            BenchRow('r1', 'Random1', depth_a=5, depth_b=2, worst_case=5, bytes_a=100, bytes_b=100),
            BenchRow('r2', 'SD', depth_a=2, depth_b=6, worst_case=6, bytes_a=10, bytes_b=10),
            BenchRow('r2', 'Random1', depth_a=8, depth_b=1, worst_case=8, bytes_a=10, bytes_b=10),
            BenchRow('r3', 'SD', error='ValueError: broken'),
        ]

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_delta_table(self):
        """Test SD saving: means 5 vs 6.5 -> (6.5 - 5) / 6.5."""
        deltas = delta_table(self.rows).set_index('scheme')
        self.assertEqual(deltas.loc['SD', 'mean_worst_case'], 5.0)
        self.assertEqual(deltas.loc['SD', 'sd_saving_pct'], 0.0)
        self.assertAlmostEqual(deltas.loc['Random1', 'sd_saving_pct'], 1.5 / 6.5 * 100.0)

    def test_report_tables(self):
        """Test error rows dropped, memory totals and log column."""
        result = report(self.rows)
        self.assertEqual(len(result.depth_table), 4)
        self.assertEqual(list(result.bytes_table['bytes_total']), [1000, 200, 20, 20])
        self.assertEqual(result.bytes_table['log10_bytes'].iloc[0], 3.0)
        self.assertIn('SD is 23.1% faster than Random1', result.text)

    def test_report_files(self):
        """Test CSV and text artifacts."""
        report(self.rows, self.temp_dir, config=AppConfig())
        for name in ('bench_depth.csv', 'bench_bytes.csv', 'bench_deltas.csv', 'bench_report.txt'):
            self.assertTrue(os.path.exists(os.path.join(self.temp_dir, name)), name)
        depth = pd.read_csv(os.path.join(self.temp_dir, 'bench_depth.csv'), comment='#')
        self.assertEqual(list(depth.columns),
                         ['ruleset', 'scheme', 'depth_a', 'depth_b', 'worst_case', 'bytes_a', 'bytes_b'])

    def test_report_needs_ok_rows(self):
        """Test all-failed bench."""
        with self.assertRaises(ValueError):
            report([BenchRow('r', 'SD', error='boom')])

    def test_rows_frame_columns(self):
        """Test wall clock stays out of the rows table."""
        self.assertNotIn('wall_clock', rows_frame(self.rows).columns)

    def test_excel_export(self):
        """Test the optional workbook has one sheet per table."""
        try:
            import openpyxl
        except ImportError:
            self.skipTest("openpyxl not installed")
        report(self.rows, self.temp_dir, excel=True)
        book = openpyxl.load_workbook(os.path.join(self.temp_dir, 'bench_report.xlsx'))
        self.assertEqual(book.sheetnames, ['depth', 'bytes', 'deltas'])


if __name__ == '__main__':
    unittest.main(verbosity=2)
