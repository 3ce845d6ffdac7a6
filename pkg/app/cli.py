import json
import functools
import click
from flask import current_app
from flask.cli import with_appcontext

from app.constants import (EXIT_DATA, EXIT_NUMERICAL, EXIT_USAGE, ORACLE_MASK_TYPES,
                           SEPARATION_METHODS)
from app.core import DataError, MissingInput, NumericalError, SeparationError
from app.services import (SeparationRequest, evaluate_files, extract_features, separate,
                          simulate_scenarios)
from app.utils import parse_mask_source, parse_pairs


def exit_on_error(func):
    """领域错误转换为退出码: 缺少输入 2, 数据/文件错误 3, 数值失败 4。"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return func(*args, **kwargs)
        except MissingInput as e:
            code, message = EXIT_USAGE, f"缺少输入: {e}"
        except NumericalError as e:
            code, message = EXIT_NUMERICAL, f"数值错误: {e}"
        except (DataError, OSError) as e:
            code, message = EXIT_DATA, f"数据错误: {e}"
        except SeparationError as e:
            code, message = EXIT_DATA, f"错误: {e}"
        current_app.logger.error(f"{ctx.info_name} 失败 (退出码 {code}): {message}")
        click.echo(f"错误: {message}", err=True)
        ctx.exit(code)
    return wrapper


def _echo_record(record):
    click.echo(json.dumps(record, ensure_ascii=False))


def _validate_mask_source(ctx, param, value):
    if value is None:
        return value
    try:
        parse_mask_source(value)
    except SeparationError as e:
        raise click.BadParameter(str(e))
    return value


def _validate_pairs(ctx, param, value):
    if value is None:
        return None
    try:
        return parse_pairs(value)
    except SeparationError as e:
        raise click.BadParameter(str(e))


# --- CLI 命令: 仿真 ---
@click.command("simulate")
@click.argument('scenario_files', nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False), help='场景输出目录。多个场景时每个场景一个子目录。')
@click.option('--jobs', type=click.IntRange(min=1), default=None, help='并行仿真的线程数 (默认取配置 DEFAULT_JOBS)。')
@with_appcontext
@exit_on_error
def simulate_command(scenario_files, out_dir, jobs):
    """根据场景文件仿真多通道两说话人混合信号。"""
    jobs = jobs or int(current_app.config.get('DEFAULT_JOBS', 1))
    current_app.logger.info(f"CLI simulate 命令已调用。场景数: {len(scenario_files)}, 输出: '{out_dir}'")
    results = simulate_scenarios(list(scenario_files), out_dir, jobs)
    for scenario_file, metadata in zip(scenario_files, results):
        click.echo(f"{scenario_file}: {metadata['num_channels']} 通道, {metadata['length_samples']} 样本, "
                   f"SIR {metadata['achieved_sir_db']:.3f} dB, 重叠 {metadata['overlap_samples']} 样本")


# --- CLI 命令: 分离 ---
@click.command("separate")
@click.argument('input_path', type=click.Path())
@click.argument('out_wav', type=click.Path(dir_okay=False))
@click.option('--method', type=click.Choice(SEPARATION_METHODS), required=True, help='通道整合方法。')
@click.option('--mask-source', default='oracle', show_default=True, callback=_validate_mask_source,
              help="掩码来源: 'oracle' (需要场景目录) 或 'btf:<路径>'。filter-sum 的 btf 文件为 (I, T, F) 权重。")
@click.option('--mask-type', type=click.Choice(ORACLE_MASK_TYPES), default=None,
              help='oracle 掩码类型。tf-mask 默认 cm, mvdr/filter-sum 默认 irm。')
@click.option('--noise-mask', default=None, callback=_validate_mask_source,
              help="MVDR 的噪声掩码 'btf:<路径>'。外部目标掩码缺省时使用 1 - m_s。")
@click.option('--theta', 'theta_deg', type=float, default=None, help='目标方向 (度), delay-sum 必需。')
@click.option('--geometry', 'geometry_path', type=click.Path(dir_okay=False), default=None, help='阵列几何 JSON 文件。')
@click.option('--reference', type=click.IntRange(min=1), default=None, help='参考通道 (1-based), 覆盖几何文件中的设置。')
@click.option('--export-weights', type=click.Path(dir_okay=False), default=None, help='把 MVDR 权重 (I, F) 导出为 BTF 文件。')
@with_appcontext
@exit_on_error
def separate_command(input_path, out_wav, method, mask_source, mask_type, noise_mask, theta_deg,
                     geometry_path, reference, export_weights):
    """对场景目录或多通道 WAV 做目标说话人分离, 输出单通道 WAV。"""
    if export_weights and method != 'mvdr':
        raise click.UsageError("--export-weights 只适用于 --method mvdr")
    current_app.logger.info(f"CLI separate 命令已调用。输入: '{input_path}', 方法: {method}, 掩码: {mask_source}")
    request = SeparationRequest(
        input_path=input_path,
        out_wav=out_wav,
        method=method,
        mask_source=mask_source,
        mask_type=mask_type,
        noise_mask=noise_mask,
        theta_deg=theta_deg,
        geometry_path=geometry_path,
        reference=None if reference is None else reference - 1,
        export_weights=export_weights,
    )
    result = separate(request)
    for record in result['records']:
        _echo_record(record)
    if not result['records']:
        click.echo(f"已写入 '{result['output']}' (没有参考信号, 未计算指标)", err=True)


# --- CLI 命令: 评估 ---
@click.command("evaluate")
@click.argument('estimate_wav', type=click.Path(dir_okay=False))
@click.argument('reference_wav', type=click.Path(dir_okay=False))
@click.option('--channel', type=click.IntRange(min=1), default=1, show_default=True, help='多通道文件使用的通道 (1-based)。')
@with_appcontext
@exit_on_error
def evaluate_command(estimate_wav, reference_wav, channel):
    """计算估计信号相对参考信号的 Si-SNR 和 SNR, 输出单行 JSON 记录。"""
    _echo_record(evaluate_files(estimate_wav, reference_wav, channel - 1))


# --- CLI 命令: 空间特征 ---
@click.command("features")
@click.argument('input_path', type=click.Path())
@click.argument('out_dir', type=click.Path(file_okay=False))
@click.option('--geometry', 'geometry_path', type=click.Path(dir_okay=False), default=None, help='阵列几何 JSON 文件。')
@click.option('--pairs', default=None, callback=_validate_pairs, help="麦克风对 (1-based), 例如 '1-15,2-14'。")
@click.option('--theta', 'theta_deg', type=float, default=None, help='AF 的假设方向 (度), 缺省时估计 DOA。')
@with_appcontext
@exit_on_error
def features_command(input_path, out_dir, geometry_path, pairs, theta_deg):
    """导出每个麦克风对的 IPD 和一个角度特征 (AF), 均为 (T, F) 的 BTF 文件。"""
    result = extract_features(input_path, out_dir, geometry_path, pairs, theta_deg)
    for path in result['files']:
        click.echo(path)
    current_app.logger.info(f"CLI features 命令完成。写入 {len(result['files'])} 个文件, θ = {result['theta_deg']}°")
