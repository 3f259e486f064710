"""
    Experiment orchestration: dataset -> model -> training -> evaluation for one run, and the suites that compare
    several runs (architectures, optimizers, ablation, freeze policy, early stopping).
"""
import json
import logging
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import pandas as pd
from humanfriendly import format_timespan

from . import version
from .config import ABLATION, COMPARE_ARCHITECTURES, COMPARE_EARLY_STOP, COMPARE_FREEZE, COMPARE_OPTIMIZERS, \
    SINGLE
from .dataset import BENIGN, MELANOMA, LesionDataset, build_manifest, carve_validation, make_folds, \
    preprocess_spec_for, split_train_test, write_manifest, write_rejects
from .errors import AblationError, ConfigError, LesionTLError, StratificationError, SuiteError
from .evaluation import METRIC_DEFINITIONS, EvaluationReport, aggregate_reports, confusion_from_predictions, \
    kfold_cross_validate, metrics_from_confusion, predict_labels, read_report, render_table_csv, \
    render_table_text, write_report
from .model import build_model, check_model_spec, export_model, list_removable_head_layers, without_head_layer, \
    write_summary_csv
from .plotting import plot_learning_curves
from .training import ADAM, SGD, predict_proba, read_history_csv, train, write_history_csv

logger = logging.getLogger('lesiontl.experiment')

CONFIG_FILE = 'config.json'
REPORT_FILE = 'report.json'
SUITE_FILE = 'suite.json'
META_FILE = 'run_meta.json'
NORMAL_TRANSFER_CAPTION = ('normal transfer learning = whole pretrained backbone frozen; modified = only the first '
                           'weight-bearing layers frozen, the rest fine-tuned')


@dataclass(frozen=True)
class RunArtifacts:
    run_id: str
    run_dir: str
    config_snapshot_path: str
    report_path: str
    history_paths: tuple = ()
    plot_paths: tuple = ()
    model_export_path: str = None
    table_paths: tuple = ()
    # (label, RunArtifacts) for every suite member that finished.
    members: tuple = ()
    # (label, error message) for every suite member that failed.
    failed: tuple = ()

    def paths(self):
        paths = [self.config_snapshot_path, self.report_path, self.model_export_path]
        paths.extend(self.history_paths)
        paths.extend(self.plot_paths)
        paths.extend(self.table_paths)
        return [p for p in paths if p]

    def member(self, label):
        return dict(self.members)[label]


def _write_json(data, path):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')

    return path


def write_run_meta(config, artifacts, seconds):
    """
        Ties every artifact of a run to the config hash that produced it. Paths are relative to the run directory.
    """
    run_dir = artifacts.run_dir
    listed = sorted(os.path.relpath(p, run_dir) for p in artifacts.paths())
    return _write_json({'run_id': config.run_id, 'config_hash': config.config_hash, 'version': version,
                        'wall_clock_seconds': seconds, 'artifacts': listed},
                       os.path.join(run_dir, META_FILE))


def write_config_snapshot(config, run_dir):
    """
        Writes the resolved config before anything else runs. A run directory is keyed by the config hash, so an
        existing snapshot must already match.
    """
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, CONFIG_FILE)
    text = config.canonical_json()
    if os.path.exists(path):
        with open(path, encoding='utf-8') as f:
            if f.read() == text:
                return path

    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)

    return path


class Experiment(object):
    """
        Runs one experiment config. `run()` dispatches on the configured suite.
    """

    def __init__(self, config, jobs=None):
        self.config = config
        self.jobs = jobs or config.jobs
        self.run_dir = os.path.join(config.output_dir, config.run_id)

    def run(self):
        suite = self.config.suite
        logger.info('Starting lesiontl v%s, run %s (suite %s)', version, self.config.run_id, suite)
        self.validate()
        started = time.time()
        snapshot = write_config_snapshot(self.config, self.run_dir)

        if suite == SINGLE:
            artifacts = run_single(self.config, self.run_dir, jobs=self.jobs)
        else:
            artifacts = getattr(self, '_run_%s' % suite)(snapshot)

        write_run_meta(self.config, artifacts, time.time() - started)
        logger.info('Run %s finished in %s', self.config.run_id, format_timespan(time.time() - started))
        return artifacts

    def plan(self):
        """
            Human readable description of what `run()` would do, without touching the dataset or training.
        """
        self.validate()
        config = self.config
        lines = ['run %s -> %s' % (config.run_id, self.run_dir),
                 'dataset %s (balancing ratio %s, seed %d)' % (config.dataset_root, config.dataset.balancing_ratio,
                                                                config.seed),
                 'split test_fraction=%s stratified=%s, validation %s of the training side' % (
                     config.split.test_fraction, config.split.stratified, config.split.val_fraction)]
        if config.kfold.enabled:
            lines.append('k-fold k=%d over %s ids (stratified=%s)' % (config.kfold.k, config.kfold.scope,
                                                                      config.kfold.stratified))

        for label, member in self.members():
            training = member.training
            lines.append('member %-24s backbone=%s head=%s freeze_first_n=%d freeze_rest=%s optimizer=%s lr=%s '
                         'max_epochs=%d early_stopping=%s' % (
                             label, member.model.backbone_id, list(member.model.head_widths),
                             member.model.freeze.freeze_first_n, member.model.freeze.freeze_backbone_rest,
                             training.optimizer_kind, training.effective_learning_rate, training.max_epochs,
                             training.early_stopping.enabled))

        return lines

    def validate(self):
        """
            Raises ConfigError for every member whose model could not be built, before anything is written.
        """
        single = self.config.suite == SINGLE
        errors = {}
        for label, member in self.members():
            for path, messages in check_model_spec(member.model).items():
                errors.setdefault(path, []).extend(m if single else '%s: %s' % (label, m) for m in messages)

        if errors:
            raise ConfigError(errors)

    def members(self):
        """
            (label, single-run config) for every run the suite consists of.
        """
        config = self.config
        suite = config.suite
        single = replace(config, suite=SINGLE)

        if suite == SINGLE:
            return [(config.model.backbone_id, config)]

        if suite == COMPARE_ARCHITECTURES:
            return [(b, replace(single, model=replace(config.model, backbone_id=b))) for b in config.architectures]

        if suite == COMPARE_OPTIMIZERS:
            return [(kind, replace(single, training=replace(config.training, optimizer_kind=kind)))
                    for kind in (ADAM, SGD)]

        if suite == ABLATION:
            removable = list_removable_head_layers(config.model)
            if not removable:
                raise AblationError('The model head has no removable layers')

            return [('baseline', single)] + [
                ('without_%s' % name, replace(single, model=without_head_layer(config.model, name)))
                for name in removable]

        if suite == COMPARE_FREEZE:
            normal = replace(config.model.freeze, freeze_backbone_rest=True)
            return [('modified', single), ('normal', replace(single, model=replace(config.model, freeze=normal)))]

        if suite == COMPARE_EARLY_STOP:
            disabled = replace(config.training.early_stopping, enabled=False)
            return [('early_stopping', single),
                    ('no_early_stopping', replace(single, training=replace(config.training,
                                                                           early_stopping=disabled)))]

        raise LesionTLError('Unknown suite %s' % suite)

    def _run_members(self):
        members = self.members()
        succeeded = []
        failed = []
        dirs = [os.path.join(self.run_dir, label) for label, _ in members]

        if self.jobs > 1 and len(members) > 1:
            context = multiprocessing.get_context('spawn')
            with ProcessPoolExecutor(max_workers=self.jobs, mp_context=context) as pool:
                futures = [pool.submit(run_single, member, d, 1) for (_, member), d in zip(members, dirs)]
                outcomes = []
                for future in futures:
                    try:
                        outcomes.append(future.result())
                    except LesionTLError as e:
                        outcomes.append(e)
        else:
            outcomes = []
            for (_, member), d in zip(members, dirs):
                try:
                    outcomes.append(run_single(member, d, jobs=1))
                except LesionTLError as e:
                    outcomes.append(e)

        for (label, _), outcome in zip(members, outcomes):
            if isinstance(outcome, Exception):
                logger.error('Suite member %s failed: %s', label, outcome)
                failed.append((label, str(outcome)))
            else:
                succeeded.append((label, outcome))

        return succeeded, failed

    def _finish_suite(self, snapshot, succeeded, failed, plot_paths=(), table_paths=(), extra=None):
        summary = {
            'run_id': self.config.run_id,
            'suite': self.config.suite,
            'config_hash': self.config.config_hash,
            'members': {label: os.path.relpath(a.report_path, self.run_dir) for label, a in succeeded},
            'failed': dict(failed),
        }
        summary.update(extra or {})
        report_path = _write_json(summary, os.path.join(self.run_dir, SUITE_FILE))
        artifacts = RunArtifacts(self.config.run_id, self.run_dir, snapshot, report_path,
                                 history_paths=tuple(p for _, a in succeeded for p in a.history_paths),
                                 plot_paths=tuple(plot_paths), table_paths=tuple(table_paths),
                                 members=tuple(succeeded), failed=tuple(failed))
        if failed:
            raise SuiteError(dict(failed), artifacts)

        return artifacts

    def _overlay(self, succeeded, name, title=None, caption=None):
        if not succeeded:
            return ()

        histories = [(label, read_history_csv(a.history_paths[0])) for label, a in succeeded]
        return plot_learning_curves(histories, os.path.join(self.run_dir, 'plots', name), title=title,
                                    caption=caption)

    def _comparison_tables(self, succeeded):
        if not succeeded:
            return ()

        table = aggregate_reports([read_report(a.report_path) for _, a in succeeded])
        csv_path = render_table_csv(table, os.path.join(self.run_dir, 'comparison.csv'))
        text_path = os.path.join(self.run_dir, 'comparison.txt')
        with open(text_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(render_table_text(table) + '\n')

        logger.info('Comparison:\n%s', render_table_text(table))
        return csv_path, text_path

    def _run_compare_architectures(self, snapshot):
        succeeded, failed = self._run_members()
        tables = self._comparison_tables(succeeded)
        plots = self._overlay(succeeded, 'architectures', title='Validation curves per architecture')
        return self._finish_suite(snapshot, succeeded, failed, plots, tables)

    def _run_compare_optimizers(self, snapshot):
        succeeded, failed = self._run_members()
        tables = self._comparison_tables(succeeded)
        plots = self._overlay(succeeded, 'optimizers', title='Comparison of SGD and Adam optimizers')
        epochs = {label: len(read_history_csv(a.history_paths[0])) for label, a in succeeded}
        return self._finish_suite(snapshot, succeeded, failed, plots, tables, {'epochs_run': epochs})

    def _run_compare_freeze(self, snapshot):
        succeeded, failed = self._run_members()
        tables = self._comparison_tables(succeeded)
        plots = self._overlay(succeeded, 'freeze_policy', title='Normal vs modified transfer learning (%s)' % (
            self.config.model.backbone_id), caption=NORMAL_TRANSFER_CAPTION)
        return self._finish_suite(snapshot, succeeded, failed, plots, tables,
                                  {'baseline_interpretation': NORMAL_TRANSFER_CAPTION})

    def _run_compare_early_stop(self, snapshot):
        succeeded, failed = self._run_members()
        tables = self._comparison_tables(succeeded)
        plots = self._overlay(succeeded, 'early_stopping', title='Validation curves with and without early stopping')
        epochs = {label: len(read_history_csv(a.history_paths[0])) for label, a in succeeded}
        return self._finish_suite(snapshot, succeeded, failed, plots, tables, {'epochs_run': epochs})

    def _run_ablation(self, snapshot):
        succeeded, failed = self._run_members()
        reports = dict((label, read_report(a.report_path)) for label, a in succeeded)
        tables = ()
        if 'baseline' in reports:
            tables = (write_ablation_table(reports, os.path.join(self.run_dir, 'ablation.csv')),)

        plots = self._overlay(succeeded, 'ablation', title='Head layer ablation')
        return self._finish_suite(snapshot, succeeded, failed, plots, tables)


def ablation_deltas(reports):
    """
        (layer_name, val_accuracy, delta_val_accuracy, test_accuracy, delta_test_accuracy) per ablated layer,
        deltas taken against the baseline run.
    """
    baseline = reports['baseline']
    baseline_test = baseline.test_metrics.accuracy if baseline.test_metrics else None
    rows = []
    for label, report in sorted(reports.items()):
        if label == 'baseline':
            continue

        test = report.test_metrics.accuracy if report.test_metrics else None
        rows.append({
            'layer_name': label[len('without_'):],
            'val_accuracy': report.val_accuracy,
            'delta_val_accuracy': report.val_accuracy - baseline.val_accuracy,
            'test_accuracy': test,
            'delta_test_accuracy': test - baseline_test if test is not None and baseline_test is not None else None,
        })

    return rows


def write_ablation_table(reports, path):
    rows = ablation_deltas(reports)
    columns = ['layer_name', 'val_accuracy', 'delta_val_accuracy', 'test_accuracy', 'delta_test_accuracy']
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, encoding='utf-8', lineterminator='\n')
    return path


def _require_both_classes(manifest, ids, what):
    # Sensitivity and specificity need at least one sample of each class.
    if not ids:
        return

    labels = manifest.labels_by_id
    present = set(labels[i] for i in ids)
    missing = [label for label in (MELANOMA, BENIGN) if label not in present]
    if missing:
        raise StratificationError('The %s has no %s samples (%d samples in total); use a larger dataset or a '
                                  'different fraction or k' % (what, ' or '.join(missing), len(ids)))


def _evaluate_split(model, samples, preprocess, batch_size):
    if not samples:
        return None, None

    predicted = predict_labels(predict_proba(model, LesionDataset(samples, preprocess), batch_size))
    cm = confusion_from_predictions([s.label for s in samples], predicted)
    return metrics_from_confusion(cm), cm


def run_single(config, run_dir, jobs=1):
    """
        One end-to-end run: manifest, split, validation carve, model, training, test evaluation, optional k-fold,
        report, learning curves and model export, all under `run_dir`.
    """
    started = time.time()
    snapshot = write_config_snapshot(config, run_dir)
    seed = config.seed
    spec = config.model
    training = config.training

    manifest = build_manifest(config.dataset_root, seed, config.dataset.balancing_ratio, config.dataset.workers)
    write_manifest(manifest, os.path.join(run_dir, 'manifest.csv'))
    write_rejects(manifest.rejects, os.path.join(run_dir, 'rejects.csv'))

    split = split_train_test(manifest, config.split.test_fraction, config.split.stratified, seed)
    _write_json({'train_ids': sorted(split.train_ids), 'test_ids': sorted(split.test_ids),
                 'test_fraction': split.test_fraction, 'stratified': split.stratified, 'seed': seed},
                os.path.join(run_dir, 'split.json'))
    train_side = manifest.subset(split.train_ids)
    train_ids, val_ids = carve_validation(train_side, config.split.val_fraction, seed)
    logger.info('Split %d samples: %d train, %d validation, %d test', len(manifest), len(train_ids), len(val_ids),
                len(split.test_ids))
    _require_both_classes(manifest, split.test_ids, 'test split')

    scope = fold_plan = None
    if config.kfold.enabled:
        scope = manifest.subset(split.train_ids if config.kfold.scope == 'train' else manifest.ids)
        fold_plan = make_folds(scope.labels_by_id, config.kfold.k, config.kfold.stratified, seed)
        for f in range(fold_plan.k):
            _require_both_classes(manifest, fold_plan.fold(f), 'fold %d' % f)

    preprocess = preprocess_spec_for(spec.backbone_id)
    model, summary = build_model(spec, seed=seed)
    write_summary_csv(summary, os.path.join(run_dir, 'summary.csv'))

    trained = train(model, LesionDataset(manifest.select(train_ids), preprocess),
                    LesionDataset(manifest.select(val_ids), preprocess), training,
                    checkpoint_dir=os.path.join(run_dir, 'checkpoints'))
    history_path = write_history_csv(trained.history, os.path.join(run_dir, 'history.csv'))

    test_metrics, test_confusion = _evaluate_split(trained.model, manifest.select(split.test_ids), preprocess,
                                                   training.batch_size)

    kfold_report = None
    if fold_plan is not None:
        kfold_report = kfold_cross_validate(scope, fold_plan, spec, training, preprocess,
                                            output_dir=os.path.join(run_dir, 'kfold'),
                                            val_fraction=config.split.val_fraction, jobs=jobs,
                                            config_digest=config.config_hash)

    best = trained.best_record
    per_fold = ()
    if kfold_report:
        per_fold = tuple(replace(f, history_ref=os.path.relpath(f.history_ref, run_dir) if f.history_ref else None)
                         for f in kfold_report.per_fold)

    report = EvaluationReport(
        architecture=spec.backbone_id,
        per_fold=per_fold,
        mean_metrics=kfold_report.mean_metrics if kfold_report else None,
        std_metrics=kfold_report.std_metrics if kfold_report else None,
        test_metrics=test_metrics,
        test_confusion=test_confusion,
        train_accuracy=best.train_accuracy,
        val_accuracy=best.val_accuracy,
        config_digest=config.config_hash,
        failed_folds=kfold_report.failed_folds if kfold_report else 0,
        details={
            'metric_definitions': METRIC_DEFINITIONS,
            'model': spec.as_dict(),
            'training': training.as_dict(),
            'preprocess': preprocess.as_dict(),
            'weights_digest': model.weights_digest,
            'parameters': {'total': summary.total_params, 'trainable': summary.trainable_params},
            'samples': {'manifest': len(manifest), 'rejected': len(manifest.rejects), 'train': len(train_ids),
                        'validation': len(val_ids), 'test': len(split.test_ids),
                        'class_counts': manifest.class_counts},
            'split': {'test_fraction': split.test_fraction, 'stratified': split.stratified,
                      'validation': 'stratified %s of the training side' % config.split.val_fraction},
            'kfold': {'enabled': config.kfold.enabled, 'k': config.kfold.k, 'scope': config.kfold.scope,
                      'std': 'population'},
            'epochs_run': len(trained.history),
            'best_epoch': trained.best_epoch,
            'stopped_early': trained.stopped_early,
        },
    )
    report_path = write_report(report, os.path.join(run_dir, REPORT_FILE))
    plot_paths = plot_learning_curves([(spec.backbone_id, trained.history)],
                                      os.path.join(run_dir, 'plots', 'learning_curves'),
                                      title='%s learning curves' % spec.backbone_id)
    model_path = export_model(trained.model, os.path.join(run_dir, 'model'))

    logger.info('Run in %s took %s: test accuracy %s', run_dir, format_timespan(time.time() - started),
                '%.4f' % test_metrics.accuracy if test_metrics else 'n/a')
    artifacts = RunArtifacts(config.run_id, run_dir, snapshot, report_path,
                             history_paths=(history_path,),
                             plot_paths=tuple(plot_paths),
                             model_export_path=model_path,
                             table_paths=(os.path.join(run_dir, 'summary.csv'), os.path.join(run_dir, 'manifest.csv')))
    write_run_meta(config, artifacts, time.time() - started)
    return artifacts


def run_experiment(config, jobs=None):
    return Experiment(config, jobs).run()


def _run_suite(config, suite, jobs=None):
    return Experiment(replace(config, suite=suite), jobs).run()


def run_optimizer_comparison(config, jobs=None):
    """
        Two runs that differ only in optimizer kind, plus an overlaid validation curve plot.
    """
    return _run_suite(config, COMPARE_OPTIMIZERS, jobs)


def run_ablation(config, jobs=None):
    """
        A baseline run plus one run per removable head layer, plus the table of accuracy deltas.
    """
    return _run_suite(config, ABLATION, jobs)


def run_architecture_comparison(config, jobs=None):
    return _run_suite(config, COMPARE_ARCHITECTURES, jobs)
