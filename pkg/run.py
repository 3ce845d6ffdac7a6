from app import create_app

app = create_app()

if __name__ == '__main__':
    # 运行浏览器: 只读的 JSON 接口, 数据来自命令行写入的运行清单
    app.logger.info("数据库表已检查/创建。")
    app.run(host='0.0.0.0', port=5000, debug=False)
