import os
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple
from flask import current_app

from app.beamform import (apply_beamformer, delay_and_sum, filter_and_sum, mvdr_pipeline_weights,
                          oracle_filter_sum_weights)
from app.constants import MANIFEST_FILE, TOOL_VERSION
from app.core import (ArrayGeometry, ComplexSpectrogram, DimensionMismatch, InvalidValue, MissingInput,
                      MultiChannelWaveform, NoPairs, SignalConfig, TimeFrequencyMask, WeightKind,
                      load_geometry, validate_dims)
from app.extensions import db
from app.masking import MaskKind, MaskSpec, apply_mask, complement_mask
from app.metrics import MetricReport, evaluate
from app.models import MetricRecord, Run
from app.simulate import SceneBundle, load_scenario, read_bundle, simulate_scenario, write_bundle
from app.spatial import compute_angle_feature, compute_ipd, estimate_doa, steering_vector
from app.stft import StftPlan, istft_trimmed, stft_padded
from app.tensorio import load_mask, load_weights, read_wav, save_feature, save_weights, write_wav
from app.utils import hash_inputs, parse_mask_source

logger = logging.getLogger(__name__)


# --- 配置与运行清单 ---

def signal_config() -> SignalConfig:
    return SignalConfig.from_mapping(current_app.config)


def config_snapshot(config: SignalConfig) -> Dict[str, Any]:
    snapshot = config.to_dict()
    snapshot['mask_clip'] = float(current_app.config.get('MASK_CLIP', 10.0))
    snapshot['diagonal_loading'] = float(current_app.config.get('DIAGONAL_LOADING', 1e-6))
    snapshot['output_bit_depth'] = int(current_app.config.get('OUTPUT_BIT_DEPTH', 32))
    return snapshot


def metric_record(utterance: str, report: MetricReport, method: Optional[str] = None) -> Dict[str, Any]:
    """单行指标记录, 字段顺序固定: utterance, (method,) si_snr_db, snr_db, length_samples。"""
    record = {'utterance': utterance}
    if method is not None:
        record['method'] = method
    record.update(report.to_dict())
    return record


def write_manifest(directory: str, entry: Dict[str, Any]) -> str:
    """把本次运行追加到目录下的 manifest.json, 文件损坏时重新开始。"""
    path = os.path.join(directory, MANIFEST_FILE)
    manifest = {'tool_version': TOOL_VERSION, 'runs': []}
    if os.path.exists(path):
        try:
            with open(path, 'r', encoding='utf-8') as f:
                existing = json.load(f)
            if isinstance(existing.get('runs'), list):
                manifest['runs'] = existing['runs']
        except (json.JSONDecodeError, AttributeError) as e:
            logger.warning(f"清单文件 '{path}' 无法解析, 将重新创建: {e}")
    manifest['runs'].append(entry)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
    return path


def record_run(command: str, arguments: Dict[str, Any], input_paths: Sequence[Optional[str]],
               outputs: Sequence[str], records: Sequence[Dict[str, Any]],
               manifest_dir: Optional[str] = None) -> Run:
    """保存运行清单到数据库, 并写入 (或追加) 输出目录下的 manifest.json。"""
    run = Run(
        command=command,
        arguments_json=json.dumps(arguments, ensure_ascii=False),
        input_hashes_json=json.dumps(hash_inputs(*input_paths)),
        config_json=json.dumps(config_snapshot(signal_config())),
        outputs_json=json.dumps(list(outputs), ensure_ascii=False),
        tool_version=TOOL_VERSION,
    )
    for record in records:
        run.metrics.append(MetricRecord(**record))

    try:
        db.session.add(run)
        db.session.commit()
        logger.info(f"运行 {run.id} ({command}) 已记录, {len(records)} 条指标。")
    except Exception as e:
        db.session.rollback()
        logger.error(f"保存运行 ({command}) 到数据库失败: {e}")

    if manifest_dir is not None:
        # 清单文件不含数据库 id 和时间戳, 相同输入得到相同内容
        entry = run.to_dict(include_metrics=False)
        del entry['id'], entry['created_at']
        entry['metrics'] = list(records)
        write_manifest(manifest_dir, entry)
    return run


# --- simulate ---

def _simulate_one(scenario_path: str, out_dir: str, config: SignalConfig,
                  default_geometry_path: Optional[str]) -> Dict[str, Any]:
    scenario = load_scenario(scenario_path)
    geometry = load_geometry(scenario.geometry_path or default_geometry_path)
    bundle = simulate_scenario(scenario, config, geometry)
    write_bundle(bundle, out_dir, geometry)
    return bundle.metadata


def simulate_scenarios(scenario_paths: Sequence[str], out_dir: str, jobs: int = 1) -> List[Dict[str, Any]]:
    """
    仿真一个或多个场景。单个场景直接写入 out_dir; 多个场景各写入 out_dir/<场景文件名>。
    线程数不影响任何输出。
    """
    if not scenario_paths:
        raise MissingInput("没有给出场景文件")
    if jobs < 1:
        raise InvalidValue(f"--jobs 必须 >= 1, 实际为 {jobs}")
    if len(scenario_paths) == 1:
        targets = [out_dir]
    else:
        stems = [os.path.splitext(os.path.basename(p))[0] for p in scenario_paths]
        if len(set(stems)) != len(stems):
            raise InvalidValue("多个场景文件同名, 无法区分输出目录")
        targets = [os.path.join(out_dir, stem) for stem in stems]

    config = signal_config()
    default_geometry_path = current_app.config.get('DEFAULT_GEOMETRY_PATH')
    logger.info(f"开始仿真 {len(scenario_paths)} 个场景, 线程数 {jobs}")
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_simulate_one, path, target, config, default_geometry_path)
                   for path, target in zip(scenario_paths, targets)]
        results = [future.result() for future in futures]

    sources = []
    for metadata in results:
        scenario = metadata['scenario']
        sources.extend([scenario['target_wav_path'], scenario['interferer_wav_path'],
                        scenario['geometry_path'], scenario['target_rir_path'], scenario['interferer_rir_path']])
    os.makedirs(out_dir, exist_ok=True)
    record_run('simulate', {'scenarios': list(scenario_paths), 'out_dir': out_dir, 'jobs': jobs},
               list(scenario_paths) + sources, targets, [], manifest_dir=out_dir)
    return results


# --- separate ---

@dataclass(frozen=True)
class SeparationRequest:
    input_path: str
    out_wav: str
    method: str
    mask_source: str = 'oracle'
    mask_type: Optional[str] = None
    noise_mask: Optional[str] = None
    theta_deg: Optional[float] = None
    geometry_path: Optional[str] = None
    reference: Optional[int] = None  # 0-based
    export_weights: Optional[str] = None


def load_input(input_path: str, geometry_path: Optional[str]
               ) -> Tuple[MultiChannelWaveform, Optional[SceneBundle], ArrayGeometry]:
    """输入可以是场景目录 (带参考信号) 或单个多通道 WAV (只有混合信号)。"""
    if not os.path.exists(input_path):
        raise FileNotFoundError(f"输入 '{input_path}' 不存在")
    if os.path.isdir(input_path):
        bundle, geometry = read_bundle(input_path)
        if geometry_path is not None:
            geometry = load_geometry(geometry_path)
        return bundle.mixture, bundle, geometry
    mixture = read_wav(input_path)
    geometry = load_geometry(geometry_path or current_app.config.get('DEFAULT_GEOMETRY_PATH'))
    return mixture, None, geometry


@dataclass(frozen=True, eq=False)
class _OracleReferences:
    target: ComplexSpectrogram
    mixture: ComplexSpectrogram
    interference: ComplexSpectrogram


def _oracle_references(bundle: Optional[SceneBundle], spec: ComplexSpectrogram, plan: StftPlan,
                       reference: int, method: str) -> _OracleReferences:
    if bundle is None:
        raise MissingInput(f"{method} 使用 oracle 掩码时需要场景目录中的参考信号")
    target_spec, _ = stft_padded(bundle.target_image, plan)
    target = target_spec.channel(reference)
    mixture = spec.channel(reference)
    # 干扰参考包含传感器噪声: x_R - s_R
    return _OracleReferences(target, mixture, ComplexSpectrogram(mixture.data - target.data))


def _mask_kind(mask_type: Optional[str], default: MaskKind) -> MaskKind:
    return default if mask_type is None else MaskKind(mask_type)


def _load_shaped_mask(path: str, spec: ComplexSpectrogram) -> TimeFrequencyMask:
    return load_mask(path, shape=(spec.num_frames, spec.num_bins))


def _mvdr_masks(request: SeparationRequest, bundle: Optional[SceneBundle], spec: ComplexSpectrogram,
                plan: StftPlan, reference: int, clip: float, refs: Optional[_OracleReferences] = None
                ) -> Tuple[TimeFrequencyMask, TimeFrequencyMask]:
    source, path = parse_mask_source(request.mask_source)
    if source == 'oracle':
        if refs is None:
            refs = _oracle_references(bundle, spec, plan, reference, request.method)
        mask_spec = MaskSpec(_mask_kind(request.mask_type, MaskKind.RATIO_IDEAL), clip)
        mask_s = mask_spec.build(refs.target, refs.mixture, refs.interference)
        if request.noise_mask is None:
            return mask_s, mask_spec.build(refs.interference, refs.mixture, refs.target)
    else:
        mask_s = _load_shaped_mask(path, spec)
        if request.noise_mask is None:
            logger.info("没有给出噪声掩码, 使用 1 - m_s。")
            return mask_s, complement_mask(mask_s)

    noise_source, noise_path = parse_mask_source(request.noise_mask)
    if noise_source != 'btf':
        raise InvalidValue("--noise-mask 只接受 'btf:<路径>'")
    return mask_s, _load_shaped_mask(noise_path, spec)


def _separate_spec(request: SeparationRequest, spec: ComplexSpectrogram, bundle: Optional[SceneBundle],
                   geometry: ArrayGeometry, plan: StftPlan) -> ComplexSpectrogram:
    config = plan.config
    reference = geometry.reference_channel
    clip = float(current_app.config.get('MASK_CLIP', 10.0))
    loading = float(current_app.config.get('DIAGONAL_LOADING', 1e-6))

    if request.method == 'delay-sum':
        if request.theta_deg is None:
            raise MissingInput("delay-sum 需要 --theta")
        return delay_and_sum(spec, steering_vector(geometry, request.theta_deg, config))

    if request.method == 'tf-mask':
        source, path = parse_mask_source(request.mask_source)
        if source == 'oracle':
            refs = _oracle_references(bundle, spec, plan, reference, request.method)
            mask = MaskSpec(_mask_kind(request.mask_type, MaskKind.COMPLEX_IDEAL), clip).build(
                refs.target, refs.mixture, refs.interference)
        else:
            mask = _load_shaped_mask(path, spec)
        return apply_mask(mask, spec.channel(reference))

    if request.method == 'filter-sum':
        source, path = parse_mask_source(request.mask_source)
        if source == 'oracle':
            refs = _oracle_references(bundle, spec, plan, reference, request.method)
            mask_s, mask_n = _mvdr_masks(request, bundle, spec, plan, reference, clip, refs)
            weights = mvdr_pipeline_weights(spec, mask_s, mask_n, reference, loading)
            weights = oracle_filter_sum_weights(spec, refs.target, weights, clip)
        else:
            # 外部估计的时变权重 (I, T, F)
            weights = load_weights(path)
            if weights.kind is not WeightKind.TIME_VARYING:
                raise DimensionMismatch('(I, T, F)', weights.data.shape, f"权重文件 '{path}' 的形状")
        return filter_and_sum(spec, weights)

    if request.method == 'mvdr':
        mask_s, mask_n = _mvdr_masks(request, bundle, spec, plan, reference, clip)
        weights = mvdr_pipeline_weights(spec, mask_s, mask_n, reference, loading)
        if request.export_weights:
            save_weights(request.export_weights, weights)
            logger.info(f"MVDR 权重已导出到 '{request.export_weights}'")
        return apply_beamformer(weights, spec)

    raise InvalidValue(f"未知的分离方法 '{request.method}'")


def separate(request: SeparationRequest) -> Dict[str, Any]:
    """
    对混合信号做通道整合并写出单通道 WAV。输入为场景目录时, 额外计算输出相对
    参考通道目标信号的指标, 并写入清单。
    """
    config = signal_config()
    plan = StftPlan.from_config(config)
    mixture, bundle, geometry = load_input(request.input_path, request.geometry_path)
    if request.reference is not None:
        geometry = geometry.with_reference(request.reference)
    if mixture.sample_rate_hz != config.sample_rate_hz:
        raise InvalidValue(f"输入采样率 {mixture.sample_rate_hz} 与配置 {config.sample_rate_hz} 不一致")

    spec, offset = stft_padded(mixture, plan)
    validate_dims(spec, geometry)
    logger.info(f"分离 '{request.input_path}': 方法 {request.method}, {spec.num_channels} 通道, "
                f"{spec.num_frames} 帧, 参考通道 {geometry.reference_channel + 1}")
    output = _separate_spec(request, spec, bundle, geometry, plan)
    estimate = istft_trimmed(output, plan, offset, mixture.num_samples)

    out_dir = os.path.dirname(os.path.abspath(request.out_wav))
    os.makedirs(out_dir, exist_ok=True)
    write_wav(request.out_wav, estimate, bit_depth=int(current_app.config.get('OUTPUT_BIT_DEPTH', 32)))

    records = []
    if bundle is not None:
        # 按磁盘上的输出计算, 与 evaluate 命令的结果一致
        written = read_wav(request.out_wav).channel(0)
        report = evaluate(written, bundle.target_image.channel(geometry.reference_channel))
        records.append(metric_record(os.path.basename(os.path.normpath(request.input_path)),
                                     report, request.method))

    outputs = [request.out_wav] + ([request.export_weights] if request.export_weights else [])
    run = record_run('separate', asdict(request),
                     [request.input_path, request.geometry_path, _btf_path(request.mask_source),
                      _btf_path(request.noise_mask)],
                     outputs, records, manifest_dir=out_dir)
    return {'run_id': run.id, 'output': request.out_wav, 'records': records}


def _btf_path(mask_source: Optional[str]) -> Optional[str]:
    if mask_source and mask_source.startswith('btf:'):
        return mask_source[4:]
    return None


# --- evaluate ---

def _pick_channel(mc: MultiChannelWaveform, channel: int):
    return mc.channel(0 if mc.num_channels == 1 else channel)


def evaluate_files(estimate_path: str, reference_path: str, channel: int = 0) -> Dict[str, Any]:
    """多通道文件取第 channel 个通道 (0-based), 单通道文件直接使用。"""
    estimate = read_wav(estimate_path)
    reference = read_wav(reference_path)
    if estimate.sample_rate_hz != reference.sample_rate_hz:
        raise DimensionMismatch(reference.sample_rate_hz, estimate.sample_rate_hz, '采样率')
    report = evaluate(_pick_channel(estimate, channel), _pick_channel(reference, channel))
    record = metric_record(os.path.basename(estimate_path), report)
    record_run('evaluate', {'estimate': estimate_path, 'reference': reference_path, 'channel': channel + 1},
               [estimate_path, reference_path], [], [record],
               manifest_dir=os.path.dirname(os.path.abspath(estimate_path)))
    return record


# --- features ---

def extract_features(input_path: str, out_dir: str, geometry_path: Optional[str] = None,
                     pairs: Optional[Sequence[Tuple[int, int]]] = None,
                     theta_deg: Optional[float] = None) -> Dict[str, Any]:
    """
    每个麦克风对输出一个 IPD (T, F), 另输出一个 θ 处的 AF (T, F)。
    未给出 θ 时用 AF 网格搜索估计 DOA。
    """
    config = signal_config()
    plan = StftPlan.from_config(config)
    mixture, _, geometry = load_input(input_path, geometry_path)
    if mixture.num_channels < 2:
        raise NoPairs("单通道输入没有麦克风对")
    if pairs:
        geometry = geometry.with_pairs(pairs)
    if not geometry.pairs:
        raise NoPairs("几何中没有麦克风对")

    spec, _ = stft_padded(mixture, plan)
    validate_dims(spec, geometry)
    if theta_deg is None:
        theta_deg = estimate_doa(spec, geometry, config=config)
        logger.info(f"未指定 --theta, 使用估计的 DOA {theta_deg}°")

    os.makedirs(out_dir, exist_ok=True)
    files = []
    for pair in geometry.pairs:
        feature = compute_ipd(spec, pair)
        path = os.path.join(out_dir, f"{feature.label}.btf")
        save_feature(path, feature)
        files.append(path)
    af = compute_angle_feature(spec, geometry, theta_deg, config)
    af_path = os.path.join(out_dir, f"{af.label}.btf")
    save_feature(af_path, af)
    files.append(af_path)

    record_run('features', {'input': input_path, 'out_dir': out_dir, 'geometry': geometry_path,
                            'pairs': [[i + 1, j + 1] for i, j in geometry.pairs], 'theta_deg': theta_deg},
               [input_path, geometry_path], files, [], manifest_dir=out_dir)
    return {'files': files, 'theta_deg': theta_deg, 'shape': [spec.num_frames, spec.num_bins]}
